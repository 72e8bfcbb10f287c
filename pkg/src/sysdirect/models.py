"""The four frame-based architectures and the ``.dsm`` checkpoint format.

Every variant is conv -> fixed-length pooling -> 3 x dense(128, tanh) ->
dense(2) -> softmax:

==================  ==========  =============================================
variant             kernel w    pooling stage
==================  ==========  =============================================
CnnGlobalAverage    9           mean of supervectors over time (s = 450)
CnnAttention        9           attention over supervectors (s = 450)
CnnLstm             5           BiLSTM(2 x 128), last states concatenated
CnnLstmAttention    5           BiLSTM(2 x 128), attention over outputs (256)
==================  ==========  =============================================

Class index 1 is the system-directed class; its posterior is the score.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, CorruptionError, ShapeError, TooShortError, VersionError
from .features import N_MELS, FeatureSequence, NormalizationStats, apply_normalization
from .layers import AttentionLayer, BiLstmLayer, Conv2dLayer, DenseLayer, global_average, maps_to_supervectors

VARIANTS = ("CnnGlobalAverage", "CnnAttention", "CnnLstm", "CnnLstmAttention")
CLASSES = ("non-system", "system")
SYSTEM = 1


def has_lstm(variant: str) -> bool:
    return variant in ("CnnLstm", "CnnLstmAttention")


def has_attention(variant: str) -> bool:
    return variant in ("CnnAttention", "CnnLstmAttention")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "CnnLstmAttention"
    conv_depth: int = 50
    conv_kh: int = 20
    conv_kw: int | None = None  # 9 without LSTM, 5 with
    stride_time: int = 5
    stride_freq: int = 3
    lstm_hidden: int = 128
    dense_units: int = 128
    dense_layers: int = 3
    n_classes: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        expected = 5 if has_lstm(self.variant) else 9
        if self.conv_kw is None:
            object.__setattr__(self, "conv_kw", expected)
        elif self.conv_kw != expected:
            raise ConfigError(f"{self.variant} requires conv_kw={expected}, got {self.conv_kw}")
        if self.conv_kh > N_MELS:
            raise ConfigError(f"conv_kh {self.conv_kh} exceeds {N_MELS} coefficients")
        for key in ("conv_depth", "conv_kh", "stride_time", "stride_freq", "lstm_hidden",
                    "dense_units", "dense_layers", "n_classes"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")

    @property
    def conv_freq_out(self) -> int:
        return 1 + (N_MELS - self.conv_kh) // self.stride_freq

    @property
    def supervector_size(self) -> int:
        return self.conv_depth * self.conv_freq_out

    @property
    def pooled_size(self) -> int:
        return 2 * self.lstm_hidden if has_lstm(self.variant) else self.supervector_size

    def conv_time_out(self, n_frames):
        return 1 + (np.asarray(n_frames) - self.conv_kw) // self.stride_time


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count; must agree with ``build``."""
    c = config
    total = c.conv_depth * c.conv_kh * c.conv_kw + c.conv_depth
    if has_lstm(c.variant):
        h = c.lstm_hidden
        total += 2 * (c.supervector_size * 4 * h + h * 4 * h + 4 * h)
    if has_attention(c.variant):
        total += c.pooled_size
    n_in = c.pooled_size
    for _ in range(c.dense_layers):
        total += n_in * c.dense_units + c.dense_units
        n_in = c.dense_units
    return total + n_in * c.n_classes + c.n_classes


@dataclass
class AttentionTrace:
    id: str
    times: np.ndarray
    alpha: np.ndarray
    words: list | None = None


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 normalization: NormalizationStats | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.normalization = normalization or NormalizationStats()
        rng = np.random.default_rng(seed)
        c = config
        self.conv = Conv2dLayer(c.conv_depth, c.conv_kh, c.conv_kw, c.stride_freq, c.stride_time,
                                rng, dtype, name="conv")
        self.lstm = BiLstmLayer(c.supervector_size, c.lstm_hidden, rng, dtype) if has_lstm(c.variant) else None
        self.attention = AttentionLayer(c.pooled_size, rng, dtype) if has_attention(c.variant) else None
        self.dense = []
        n_in = c.pooled_size
        for k in range(c.dense_layers):
            self.dense.append(DenseLayer(n_in, c.dense_units, "tanh", rng, dtype, name=f"dense{k}"))
            n_in = c.dense_units
        self.output = DenseLayer(n_in, c.n_classes, "none", rng, dtype, name="output")

    # -- parameters -----------------------------------------------------------
    def layers(self) -> dict[str, list[Tensor]]:
        out = {"conv": self.conv.params()}
        if self.lstm is not None:
            out["lstm"] = self.lstm.params()
        if self.attention is not None:
            out["attention"] = self.attention.params()
        for k, layer in enumerate(self.dense):
            out[f"dense{k}"] = layer.params()
        out["output"] = self.output.params()
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for params in self.layers().values() for p in params}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise ConfigError("parameter names do not match the model")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=self.dtype)
            p.zero_grad()

    # -- forward --------------------------------------------------------------
    def logits(self, x, lengths=None) -> tuple[Tensor, Tensor | None, np.ndarray]:
        """Batched forward on normalized, zero-padded frames.

        ``x`` is (B, T, 45); ``lengths`` the valid frame counts.  Returns the
        (B, 2) logits, the (B, l) attention weights (attention variants) and
        the valid post-conv lengths.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        b, t, _ = x.shape
        lengths = np.full(b, t) if lengths is None else np.asarray(lengths).reshape(-1)
        if np.any(lengths < self.config.conv_kw):
            raise TooShortError(f"sequence of {int(lengths.min())} frames is shorter than the "
                                f"{self.config.conv_kw}-frame convolution window")
        valid = self.config.conv_time_out(lengths)
        seq = maps_to_supervectors(self.conv(x))
        alpha = None
        if self.lstm is not None:
            outputs, last = self.lstm(seq, valid)
            if self.attention is not None:
                pooled, alpha = self.attention(outputs, valid)
            else:
                pooled = last
        elif self.attention is not None:
            pooled, alpha = self.attention(seq, valid)
        else:
            pooled = global_average(seq, valid)
        h = pooled
        for layer in self.dense:
            h = layer(h)
        return self.output(h), alpha, valid

    def prepare(self, seq: FeatureSequence, normalize: bool = False) -> np.ndarray:
        if normalize:
            seq = apply_normalization(seq, self.normalization)
        return np.asarray(seq.frames, dtype=self.dtype)

    def forward(self, seq: FeatureSequence, normalize: bool = False) -> tuple[np.ndarray, AttentionTrace | None]:
        """Posterior over (non-system, system) for one utterance, plus the
        attention trace for attention variants."""
        frames = self.prepare(seq, normalize)
        with ad.no_grad():
            logits, alpha, valid = self.logits(frames[None])
            post = ad.softmax(logits, axis=1).data[0]
        trace = None
        if alpha is not None:
            trace = AttentionTrace(seq.id, self.trace_times(int(valid[0]), seq.frame_shift_s, seq.frame_length_s),
                                   alpha.data[0, :valid[0]].astype(np.float64))
        return post.astype(np.float64), trace

    def trace_times(self, l: int, frame_shift_s: float, frame_length_s: float) -> np.ndarray:
        """Centre time (s) of the frames covered by each post-conv position."""
        c = self.config
        centre_frame = np.arange(l) * c.stride_time + (c.conv_kw - 1) / 2.0
        return centre_frame * frame_shift_s + frame_length_s / 2.0

    def score(self, seq: FeatureSequence, normalize: bool = False) -> float:
        post, _ = self.forward(seq, normalize)
        return float(post[SYSTEM])


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, seed, dtype)


def forward(model: Model, seq: FeatureSequence, normalize: bool = False):
    return model.forward(seq, normalize)


# --- checkpoint (.dsm) ---------------------------------------------------------
#
# b"DSM\0" | u32 header length | JSON header | little-endian float32 payload.
# The header lists parameters in payload order and carries a CRC32 of the payload.

MAGIC = b"DSM\x00"
FORMAT_VERSION = 1


def save(model: Model, path: str | Path) -> None:
    params = model.named_parameters()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in params.values())
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
        "normalization": {"mean": model.normalization.mean.tolist(), "std": model.normalization.std.tolist()},
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def load(path: str | Path) -> Model:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptionError(f"{path}: not a model checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + n:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(data[8:8 + n])
    except ValueError:
        raise CorruptionError(f"{path}: unreadable header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint format {header.get('format_version')} != {FORMAT_VERSION}")
    payload = data[8 + n:]
    if len(payload) != header["payload_bytes"] or zlib.crc32(payload) != header["crc32"]:
        raise CorruptionError(f"{path}: payload checksum mismatch")
    norm = header["normalization"]
    model = Model(ModelConfig(**header["config"]), seed=0, dtype=np.float32,
                  normalization=NormalizationStats(norm["mean"], norm["std"]))
    state, offset = {}, 0
    for entry in header["parameters"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        offset += 4 * count
    model.load_state(state)
    return model
