"""Network building blocks: valid 2-D convolution over (frequency, time),
bidirectional LSTM, attention pooling, global averaging and dense layers.

All layers operate on batches.  Sequences shorter than the padded batch
length are described by integer ``valid`` lengths; padded positions never
influence valid outputs.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, TooShortError


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _param(data, name) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _batched(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    return x, x.ndim == 2


class Conv2dLayer:
    """``depth`` kernels of height ``kh`` (frequency) by width ``kw`` (time), ReLU output."""

    def __init__(self, depth: int, kh: int, kw: int, stride_freq: int, stride_time: int,
                 rng: np.random.Generator, dtype=np.float32, name: str = "conv"):
        if depth < 1 or kh < 1 or kw < 1:
            raise ShapeError(f"conv: invalid geometry depth={depth}, kernel={kh}x{kw}")
        self.kh, self.kw = kh, kw
        self.stride_freq, self.stride_time = stride_freq, stride_time
        self.weight = _param(glorot(rng, (depth, kh, kw), kh * kw, depth * kh * kw, dtype), f"{name}.weight")
        self.bias = _param(np.zeros(depth, dtype=dtype), f"{name}.bias")

    @property
    def depth(self) -> int:
        return self.weight.shape[0]

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def out_freq(self, n_freq: int) -> int:
        return 1 + (n_freq - self.kh) // self.stride_freq

    def out_time(self, n_time) -> np.ndarray | int:
        return 1 + (np.asarray(n_time) - self.kw) // self.stride_time

    def __call__(self, x) -> Tensor:
        """(B, T, F) or (T, F) -> (B, d, j, l) or (d, j, l)."""
        x, single = _batched(x)
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        b, t, f = x.shape
        if f < self.kh:
            raise ShapeError(f"conv: kernel height {self.kh} exceeds {f} input coefficients")
        if t < self.kw:
            raise TooShortError(f"conv: sequence of {t} frames is shorter than kernel width {self.kw}")
        patches = ad.unfold2d(ad.transpose(x, (0, 2, 1)), self.kh, self.kw, self.stride_freq, self.stride_time)
        kernel = ad.transpose(ad.reshape(self.weight, (self.depth, self.kh * self.kw)), (1, 0))
        maps = ad.relu(patches @ kernel + self.bias)  # (B, j, l, d)
        maps = ad.transpose(maps, (0, 3, 1, 2))
        return maps[0] if single else maps


def conv2d_forward(seq, layer: Conv2dLayer) -> Tensor:
    return layer(seq)


def maps_to_supervectors(maps: Tensor) -> Tensor:
    """(B, d, j, l) -> (B, l, d*j); supervector t stacks column t of every map in map order."""
    single = maps.ndim == 3
    if single:
        maps = ad.reshape(maps, (1,) + maps.shape)
    b, d, j, l = maps.shape
    out = ad.reshape(ad.transpose(maps, (0, 3, 1, 2)), (b, l, d * j))
    return out[0] if single else out


def _time_mask(valid, b: int, l: int) -> np.ndarray:
    valid = np.asarray(valid).reshape(-1)
    if valid.shape != (b,):
        raise ShapeError(f"expected {b} valid lengths, got {valid.shape}")
    if np.any(valid < 1) or np.any(valid > l):
        raise ShapeError(f"valid lengths must lie in [1, {l}], got {valid.tolist()}")
    return np.arange(l)[None, :] < valid[:, None]


def global_average(seq: Tensor, valid=None) -> Tensor:
    """Mean over time of a (B, l, s) supervector sequence, restricted to valid positions.

    Averaging supervectors over time equals averaging each map over its
    length and concatenating in map order.
    """
    single = seq.ndim == 2
    if single:
        seq = ad.reshape(seq, (1,) + seq.shape)
    b, l, s = seq.shape
    if valid is None or np.all(np.asarray(valid) == l):
        out = ad.reduce_mean(seq, axis=1)
    else:
        mask = _time_mask(valid, b, l)
        weights = mask / np.asarray(valid, dtype=np.float64).reshape(-1, 1)
        w = np.ascontiguousarray(np.broadcast_to(weights[:, :, None], (b, l, s)), dtype=seq.dtype)
        out = ad.reduce_sum(seq * w, axis=1)
    return out[0] if single else out


def global_average_maps(maps: Tensor, valid=None) -> Tensor:
    """(B, d, j, l) maps -> (B, d*j) per-map time averages concatenated."""
    return global_average(maps_to_supervectors(maps), valid)


class BiLstmLayer:
    """Bidirectional LSTM, gates ordered (input, forget, candidate, output)."""

    def __init__(self, input_size: int, hidden: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "lstm", forget_bias: float = 1.0):
        self.input_size, self.hidden = input_size, hidden
        self.directions = {}
        for direction in ("fwd", "bwd"):
            bias = np.zeros(4 * hidden, dtype=dtype)
            bias[hidden:2 * hidden] = forget_bias
            self.directions[direction] = (
                _param(glorot(rng, (input_size, 4 * hidden), input_size, 4 * hidden, dtype), f"{name}.{direction}.w_input"),
                _param(glorot(rng, (hidden, 4 * hidden), hidden, 4 * hidden, dtype), f"{name}.{direction}.w_hidden"),
                _param(bias, f"{name}.{direction}.bias"),
            )

    def params(self) -> list[Tensor]:
        return [p for d in ("fwd", "bwd") for p in self.directions[d]]

    def _run(self, x: Tensor, direction: str, mask: np.ndarray | None) -> tuple[list[Tensor], Tensor]:
        w_in, w_h, bias = self.directions[direction]
        b, l, _ = x.shape
        n = self.hidden
        proj = x @ w_in + bias  # (B, l, 4h)
        h = Tensor(np.zeros((b, n), dtype=x.dtype))
        c = h
        steps = range(l) if direction == "fwd" else range(l - 1, -1, -1)
        outs: list[Tensor] = [None] * l
        for t in steps:
            z = proj[:, t, :] + h @ w_h
            i = ad.sigmoid(z[:, :n])
            f = ad.sigmoid(z[:, n:2 * n])
            g = ad.tanh(z[:, 2 * n:3 * n])
            o = ad.sigmoid(z[:, 3 * n:])
            c_new = f * c + i * g
            h_new = o * ad.tanh(c_new)
            if mask is not None and not mask[:, t].all():
                keep = np.ascontiguousarray(np.broadcast_to(mask[:, t:t + 1], (b, n)), dtype=x.dtype)
                c = c_new * keep + c * (1 - keep)
                h = h_new * keep + h * (1 - keep)
            else:
                c, h = c_new, h_new
            outs[t] = h
        return outs, h

    def __call__(self, x, valid=None) -> tuple[Tensor, Tensor]:
        """(B, l, s) -> outputs (B, l, 2h) and last_concat (B, 2h).

        last_concat joins the forward state after the last valid step with the
        backward state after it has consumed the whole (reversed) sequence.
        """
        x, single = _batched(x)
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        b, l, s = x.shape
        if s != self.input_size:
            raise ShapeError(f"lstm: expected input size {self.input_size}, got {s}")
        if l < 1:
            raise ShapeError("lstm: empty sequence")
        mask = None
        if valid is not None and not np.all(np.asarray(valid) == l):
            mask = _time_mask(valid, b, l)
        fwd, fwd_last = self._run(x, "fwd", mask)
        bwd, bwd_last = self._run(x, "bwd", mask)
        outputs = ad.concat([ad.stack(fwd, axis=1), ad.stack(bwd, axis=1)], axis=2)
        last = ad.concat([fwd_last, bwd_last], axis=1)
        if single:
            return outputs[0], last[0]
        return outputs, last


def bilstm_forward(seq, layer: BiLstmLayer, valid=None):
    return layer(seq, valid)


class AttentionLayer:
    """Self-attention pooling: b = tanh(w X), alpha = softmax(b), c = X alpha."""

    def __init__(self, size: int, rng: np.random.Generator, dtype=np.float32, name: str = "attention"):
        self.size = size
        self.w = _param(glorot(rng, (1, size), 1, size, dtype), f"{name}.w")

    def params(self) -> list[Tensor]:
        return [self.w]

    def __call__(self, x, valid=None) -> tuple[Tensor, Tensor]:
        """(B, l, s) -> context (B, s) and alpha (B, l), alpha exactly 0 past ``valid``."""
        x, single = _batched(x)
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        b, l, s = x.shape
        if s != self.size:
            raise ShapeError(f"attention: expected feature size {self.size}, got {s}")
        if valid is None:
            valid = np.full(b, l)
        valid = np.asarray(valid).reshape(-1)
        if np.any(valid < 1):
            raise ShapeError("attention over an empty sequence")
        mask = _time_mask(valid, b, l)
        scores = ad.reshape(ad.tanh(x @ ad.transpose(self.w, (1, 0))), (b, l))
        alpha = ad.softmax(scores, axis=1, mask=None if mask.all() else mask)
        if not mask.all():
            # zero padded columns so non-finite garbage cannot leak through 0 * x
            x = x * np.ascontiguousarray(np.broadcast_to(mask[:, :, None], x.shape), dtype=x.dtype)
        context = ad.reshape(ad.reshape(alpha, (b, 1, l)) @ x, (b, s))
        if single:
            return context[0], alpha[0]
        return context, alpha


def attention(seq, layer: AttentionLayer, valid_len: int | None = None):
    """Unbatched convenience: returns (context, alpha over the valid prefix)."""
    seq, _ = _batched(seq)
    if seq.ndim != 2:
        raise ShapeError("attention(): expected a single (l, s) sequence")
    l = seq.shape[0]
    valid_len = l if valid_len is None else valid_len
    if valid_len < 1:
        raise ShapeError("attention over an empty sequence")
    if valid_len > l:
        raise ShapeError(f"valid_len {valid_len} exceeds sequence length {l}")
    context, alpha = layer(ad.reshape(seq, (1, l, seq.shape[1])), [valid_len])
    return context[0], alpha[0, :valid_len]


ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "none": lambda x: x}


class DenseLayer:
    def __init__(self, n_in: int, n_out: int, activation: str, rng: np.random.Generator,
                 dtype=np.float32, name: str = "dense"):
        if activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {activation!r}")
        self.activation = activation
        self.weight = _param(glorot(rng, (n_in, n_out), n_in, n_out, dtype), f"{name}.weight")
        self.bias = _param(np.zeros(n_out, dtype=dtype), f"{name}.bias")

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        single = x.ndim == 1
        if single:
            x = ad.reshape(x, (1, x.shape[0]))
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"dense: input size {x.shape[-1]} != {self.weight.shape[0]}")
        y = ACTIVATIONS[self.activation](x @ self.weight + self.bias)
        return y[0] if single else y


def dense_forward(x, layer: DenseLayer) -> Tensor:
    return layer(x)
