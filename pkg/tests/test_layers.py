import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sysdirect import autodiff as ad
from sysdirect.autodiff import Tensor, grad_check
from sysdirect.errors import ShapeError, TooShortError
from sysdirect.layers import (
    AttentionLayer, BiLstmLayer, Conv2dLayer, DenseLayer, attention, bilstm_forward, conv2d_forward,
    dense_forward, global_average, global_average_maps, maps_to_supervectors,
)

F64 = np.float64


def rng(seed=0):
    return np.random.default_rng(seed)


# --- convolution ---------------------------------------------------------------

class TestConv:
    def test_output_shape_laws(self):
        layer = Conv2dLayer(50, 20, 9, 3, 5, rng(), F64)
        maps = conv2d_forward(rng(1).standard_normal((104, 45)), layer)
        assert maps.shape == (50, 1 + 25 // 3, 1 + (104 - 9) // 5) == (50, 9, 20)

    def test_zero_kernels_give_zero_maps(self):
        layer = Conv2dLayer(4, 20, 5, 3, 5, rng(), F64)
        layer.weight.data[:] = 0
        assert not np.any(layer(rng(1).standard_normal((30, 45))).data)

    def test_too_short(self):
        layer = Conv2dLayer(2, 20, 9, 3, 5, rng(), F64)
        with pytest.raises(TooShortError):
            layer(np.zeros((8, 45)))

    def test_matches_direct_loop(self):
        layer = Conv2dLayer(3, 4, 3, 2, 2, rng(), F64)
        x = rng(2).standard_normal((9, 45))
        maps = layer(x).data
        w, b = layer.weight.data, layer.bias.data
        for d in range(3):
            for jj in range(maps.shape[1]):
                for ll in range(maps.shape[2]):
                    window = x[2 * ll:2 * ll + 3, 2 * jj:2 * jj + 4].T  # (freq, time)
                    ref = max(0.0, float(np.sum(window * w[d])) + b[d])
                    assert maps[d, jj, ll] == pytest.approx(ref, abs=1e-12)

    def test_grad_check(self):
        layer = Conv2dLayer(3, 20, 5, 3, 5, rng(3), F64)
        layer.bias.data[:] = 0.1
        x = Tensor(rng(4).standard_normal((2, 17, 45)), requires_grad=True)
        c = rng(5).standard_normal((2, 3, 9, 3))
        err = grad_check(lambda: ad.reduce_sum(layer(x) * c), layer.params() + [x], max_entries=40)
        assert err < 1e-4


# --- pooling -------------------------------------------------------------------

class TestPooling:
    def test_single_position_average_is_flatten(self):
        maps = Tensor(rng().standard_normal((3, 4, 1)))
        np.testing.assert_array_equal(global_average_maps(maps).data, maps.data.reshape(-1))

    def test_constant_map(self):
        np.testing.assert_array_equal(global_average_maps(Tensor(np.full((2, 3, 5), 0.7))).data, 0.7)

    def test_matches_naive_loop(self):
        m = rng(1).standard_normal((2, 3, 4))
        ref = []
        for d in range(2):
            for jj in range(3):
                total = 0.0
                for ll in range(4):
                    total += m[d, jj, ll]
                ref.append(total / 4)
        np.testing.assert_allclose(global_average_maps(Tensor(m)).data, ref, rtol=1e-14)

    def test_supervectors_by_definition(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        maps = Tensor(np.array([[[a, b]], [[c, d]]]))
        np.testing.assert_array_equal(maps_to_supervectors(maps).data, [[a, c], [b, d]])

    def test_supervectors_single_map(self):
        m = rng(2).standard_normal((1, 3, 4))
        np.testing.assert_array_equal(maps_to_supervectors(Tensor(m)).data, m[0].T)

    def test_supervector_mean_equals_global_average(self):
        m = Tensor(rng(3).standard_normal((5, 9, 7)))
        np.testing.assert_allclose(maps_to_supervectors(m).data.mean(axis=0),
                                   global_average_maps(m).data, rtol=1e-13)

    def test_masked_average_ignores_padding(self):
        seq = rng(4).standard_normal((2, 6, 3))
        out = global_average(Tensor(seq), [4, 6]).data
        np.testing.assert_allclose(out[0], seq[0, :4].mean(axis=0), rtol=1e-13)
        np.testing.assert_allclose(out[1], seq[1].mean(axis=0), rtol=1e-13)


# --- LSTM ----------------------------------------------------------------------

def sig(v):
    return 1 / (1 + math.exp(-v))


def scalar_lstm(xs, w_in, w_h, bias, hidden):
    """Per-gate, per-unit scalar reference of one LSTM direction."""
    h = [0.0] * hidden
    c = [0.0] * hidden
    out = []
    for x in xs:
        new_h, new_c = [], []
        for u in range(hidden):
            def pre(gate):
                col = gate * hidden + u
                return (sum(x[k] * w_in[k][col] for k in range(len(x)))
                        + sum(h[k] * w_h[k][col] for k in range(hidden)) + bias[col])
            i, f, g, o = sig(pre(0)), sig(pre(1)), math.tanh(pre(2)), sig(pre(3))
            cu = f * c[u] + i * g
            new_c.append(cu)
            new_h.append(o * math.tanh(cu))
        h, c = new_h, new_c
        out.append(h)
    return out


class TestBiLstm:
    def test_zero_weights_fixed_point(self):
        layer = BiLstmLayer(3, 4, rng(), F64, forget_bias=0.0)
        for p in layer.params():
            p.data[:] = 0
        outs, last = bilstm_forward(rng(1).standard_normal((6, 3)), layer)
        assert not np.any(outs.data) and not np.any(last.data)

    def test_single_step(self):
        layer = BiLstmLayer(3, 2, rng(), F64)
        outs, last = layer(rng(1).standard_normal((1, 3)))
        assert outs.shape == (1, 4)
        np.testing.assert_array_equal(outs.data[0], last.data)

    def test_matches_scalar_reference(self):
        layer = BiLstmLayer(3, 2, rng(2), F64)
        for p in layer.params():
            p.data[:] = rng(3).uniform(-1, 1, p.shape)
        x = rng(4).standard_normal((4, 3))
        outs, last = layer(x)
        fw = scalar_lstm(x.tolist(), *[p.data.tolist() for p in layer.directions["fwd"]], 2)
        bw = scalar_lstm(x[::-1].tolist(), *[p.data.tolist() for p in layer.directions["bwd"]], 2)[::-1]
        ref = np.array([f + b for f, b in zip(fw, bw)])
        np.testing.assert_allclose(outs.data, ref, atol=1e-12)
        np.testing.assert_allclose(last.data, fw[-1] + bw[0], atol=1e-12)

    def test_reversal_with_swapped_directions_mirrors(self):
        a = BiLstmLayer(3, 2, rng(5), F64)
        b = BiLstmLayer(3, 2, rng(6), F64)
        b.directions = {"fwd": a.directions["bwd"], "bwd": a.directions["fwd"]}
        x = rng(7).standard_normal((5, 3))
        out_a, _ = a(x)
        out_b, _ = b(x[::-1].copy())
        mirrored = np.concatenate([out_a.data[::-1, 2:], out_a.data[::-1, :2]], axis=1)
        np.testing.assert_allclose(out_b.data, mirrored, atol=1e-14)

    def test_padding_equivalence(self):
        layer = BiLstmLayer(3, 2, rng(8), F64)
        x = rng(9).standard_normal((2, 6, 3))
        x[0, 4:] = 0
        outs, last = layer(x, [4, 6])
        ref_outs, ref_last = layer(x[0, :4])
        np.testing.assert_allclose(outs.data[0, :4], ref_outs.data, atol=1e-14)
        np.testing.assert_allclose(last.data[0], ref_last.data, atol=1e-14)

    def test_grad_check_masked(self):
        layer = BiLstmLayer(3, 2, rng(10), F64)
        x = Tensor(rng(11).standard_normal((2, 5, 3)), requires_grad=True)
        c1, c2 = rng(12).standard_normal((2, 5, 4)), rng(13).standard_normal((2, 4))

        def f():
            outs, last = layer(x, [3, 5])
            return ad.reduce_sum(outs * c1) + ad.reduce_sum(last * c2)

        assert grad_check(f, layer.params() + [x]) < 1e-4


# --- attention -----------------------------------------------------------------

class TestAttention:
    def make(self, s, w=None):
        layer = AttentionLayer(s, rng(), F64)
        if w is not None:
            layer.w.data[:] = np.asarray(w, dtype=F64).reshape(1, s)
        return layer

    def test_zero_weights_uniform(self):
        x = rng(1).standard_normal((6, 3))
        c, alpha = attention(x, self.make(3, np.zeros(3)))
        np.testing.assert_array_equal(alpha.data, np.full(6, 1 / 6))
        np.testing.assert_allclose(c.data, x.mean(axis=0), rtol=1e-14)

    def test_single_position(self):
        x = rng(2).standard_normal((1, 4))
        c, alpha = attention(x, self.make(4))
        np.testing.assert_array_equal(alpha.data, [1.0])
        np.testing.assert_array_equal(c.data, x[0])

    def test_identical_columns(self):
        col = rng(3).standard_normal(3)
        c, alpha = attention(np.stack([col, col]), self.make(3))
        np.testing.assert_array_equal(alpha.data, [0.5, 0.5])
        np.testing.assert_allclose(c.data, col, rtol=1e-15)

    def test_worked_example(self):
        mpmath.mp.dps = 30
        b2 = mpmath.tanh(1)
        a2 = mpmath.e ** b2 / (1 + mpmath.e ** b2)
        # columns x1 = (0, 5), x2 = (1, 5) as rows of the (l, s) layout
        c, alpha = attention(np.array([[0.0, 5.0], [1.0, 5.0]]), self.make(2, [1.0, 0.0]))
        np.testing.assert_allclose(alpha.data, [float(1 - a2), float(a2)], rtol=1e-14)
        np.testing.assert_allclose(c.data, [float(a2), 5.0], rtol=1e-14)
        assert alpha.data[1] == pytest.approx(0.68170, abs=1e-5)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ShapeError):
            attention(np.zeros((3, 2)), self.make(2), valid_len=0)

    def test_masking_with_garbage(self):
        layer = self.make(5)
        x = rng(4).standard_normal((7, 5))
        padded = np.concatenate([x, rng(5).uniform(-1e6, 1e6, (13, 5))])
        c_ref, a_ref = attention(x, layer)
        c, a = attention(padded, layer, valid_len=7)
        np.testing.assert_allclose(c.data, c_ref.data, rtol=1e-14, atol=1e-15)
        np.testing.assert_array_equal(a.data, a_ref.data)

    @pytest.mark.parametrize("l", [1, 10, 50])
    def test_length_independence(self, l):
        c, alpha = attention(rng(l).standard_normal((l, 6)), self.make(6))
        assert c.shape == (6,) and alpha.shape == (l,)

    def test_grad_check(self):
        layer = self.make(4)
        x = Tensor(rng(6).standard_normal((2, 6, 4)), requires_grad=True)
        c = rng(7).standard_normal((2, 4))
        f = lambda: ad.reduce_sum(layer(x, [4, 6])[0] * c)  # noqa: E731
        assert grad_check(f, layer.params() + [x]) < 1e-4

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 30), st.integers(0, 2**32 - 1))
    def test_alpha_sums_to_one(self, s, l, seed):
        r = np.random.default_rng(seed)
        layer = AttentionLayer(s, r, F64)
        layer.w.data *= r.uniform(0, 20)
        _, alpha = attention(r.standard_normal((l, s)) * 10, layer)
        assert abs(alpha.data.sum() - 1) < 1e-6


# --- dense ---------------------------------------------------------------------

class TestDense:
    def test_identity(self):
        layer = DenseLayer(3, 3, "none", rng(), F64)
        layer.weight.data[:] = np.eye(3)
        x = np.array([0.1, -2.0, 3.0])
        np.testing.assert_array_equal(dense_forward(x, layer).data, x)

    def test_bias_only(self):
        layer = DenseLayer(3, 2, "none", rng(), F64)
        layer.weight.data[:] = 0
        layer.bias.data[:] = [4.0, -1.0]
        np.testing.assert_array_equal(layer(np.ones(3)).data, [4.0, -1.0])

    def test_matches_naive_loop(self):
        layer = DenseLayer(4, 3, "tanh", rng(1), F64)
        layer.bias.data[:] = rng(2).standard_normal(3)
        x = rng(3).standard_normal(4)
        w, b = layer.weight.data, layer.bias.data
        ref = [math.tanh(sum(x[i] * w[i, o] for i in range(4)) + b[o]) for o in range(3)]
        np.testing.assert_allclose(layer(x).data, ref, rtol=1e-14)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            DenseLayer(4, 3, "none", rng(), F64)(np.ones(5))

    @pytest.mark.parametrize("act", ["tanh", "relu", "none"])
    def test_grad_check(self, act):
        layer = DenseLayer(4, 3, act, rng(4), F64)
        layer.bias.data[:] = 0.05
        x = Tensor(rng(5).standard_normal((2, 4)), requires_grad=True)
        c = rng(6).standard_normal((2, 3))
        assert grad_check(lambda: ad.reduce_sum(layer(x) * c), layer.params() + [x]) < 1e-4
