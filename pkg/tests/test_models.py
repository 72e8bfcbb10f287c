import numpy as np
import pytest

from sysdirect import autodiff as ad
from sysdirect.errors import ConfigError, CorruptionError, TooShortError, VersionError
from sysdirect.features import FeatureSequence, NormalizationStats
from sysdirect.models import (
    VARIANTS, ModelConfig, build, forward, has_attention, load, parameter_count, save,
)


def seq(t, seed=0):
    return FeatureSequence(np.random.default_rng(seed).standard_normal((t, 45)), id=f"u{t}")


@pytest.fixture(scope="module")
def models():
    return {v: build(ModelConfig(v), seed=0) for v in VARIANTS}


class TestConfig:
    def test_kernel_width_follows_variant(self):
        assert ModelConfig("CnnGlobalAverage").conv_kw == 9
        assert ModelConfig("CnnAttention").conv_kw == 9
        assert ModelConfig("CnnLstm").conv_kw == 5
        assert ModelConfig("CnnLstmAttention").conv_kw == 5

    def test_inconsistent_width_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig("CnnLstm", conv_kw=9)
        with pytest.raises(ConfigError):
            ModelConfig("CnnAttention", conv_kw=5)
        with pytest.raises(ConfigError):
            ModelConfig("Transformer")

    def test_reported_hyperparameters(self):
        c = ModelConfig("CnnLstmAttention")
        assert (c.conv_depth, c.conv_kh, c.stride_freq, c.stride_time) == (50, 20, 3, 5)
        assert (c.lstm_hidden, c.dense_units, c.dense_layers, c.n_classes) == (128, 128, 3, 2)
        assert c.supervector_size == 450 and c.pooled_size == 256
        assert ModelConfig("CnnGlobalAverage").pooled_size == 450


class TestBuild:
    def test_lstm_attention_pipeline(self, models):
        m = models["CnnLstmAttention"]
        assert m.conv.weight.shape == (50, 20, 5)
        assert m.lstm.directions["fwd"][0].shape == (450, 512)
        assert m.lstm.directions["fwd"][1].shape == (128, 512)
        assert m.attention.w.shape == (1, 256)
        assert [d.weight.shape for d in m.dense] == [(256, 128), (128, 128), (128, 128)]
        assert m.output.weight.shape == (128, 2)

    def test_global_average_pipeline(self, models):
        m = models["CnnGlobalAverage"]
        assert m.conv.weight.shape == (50, 20, 9)
        assert m.lstm is None and m.attention is None
        assert m.dense[0].weight.shape == (450, 128)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_parameter_count_formula(self, models, variant):
        assert models[variant].n_parameters() == parameter_count(ModelConfig(variant))

    def test_documented_counts(self):
        conv9, conv5 = 50 * 20 * 9 + 50, 50 * 20 * 5 + 50
        dense = lambda n: n * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 2 + 2  # noqa: E731
        lstm = 2 * (450 * 512 + 128 * 512 + 512)
        assert parameter_count(ModelConfig("CnnGlobalAverage")) == conv9 + dense(450)
        assert parameter_count(ModelConfig("CnnAttention")) == conv9 + 450 + dense(450)
        assert parameter_count(ModelConfig("CnnLstm")) == conv5 + lstm + dense(256)
        assert parameter_count(ModelConfig("CnnLstmAttention")) == conv5 + lstm + 256 + dense(256)

    def test_seed_determinism(self):
        a, b = build(ModelConfig("CnnLstm"), 7), build(ModelConfig("CnnLstm"), 7)
        for (na, pa), (nb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()
        c = build(ModelConfig("CnnLstm"), 8)
        assert c.conv.weight.data.tobytes() != a.conv.weight.data.tobytes()


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_posterior_valid_and_length_free(self, models, variant):
        m = models[variant]
        kw = m.config.conv_kw
        for t in (kw, 50, 100, 500):
            post, trace = forward(m, seq(t, t))
            assert post.shape == (2,)
            assert np.all((post > 0) & (post < 1)) and abs(post.sum() - 1) < 1e-6
            if has_attention(variant):
                assert trace.alpha.size == 1 + (t - kw) // 5
                assert abs(trace.alpha.sum() - 1) < 1e-6
                assert np.all(np.diff(trace.times) > 0)
            else:
                assert trace is None

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_too_short(self, models, variant):
        with pytest.raises(TooShortError):
            forward(models[variant], seq(models[variant].config.conv_kw - 1))

    def test_zero_output_layer_is_uninformative(self):
        m = build(ModelConfig("CnnAttention"), 1)
        m.output.weight.data[:] = 0
        post, _ = forward(m, seq(60))
        np.testing.assert_array_equal(post, [0.5, 0.5])

    def test_trace_times_are_window_centres(self, models):
        m = models["CnnLstmAttention"]
        _, trace = forward(m, seq(30))
        # position t covers frames 5t..5t+4, centre frame 5t+2, frame centre at +12.5 ms
        np.testing.assert_allclose(trace.times, (5 * np.arange(6) + 2) * 0.01 + 0.0125)

    def test_internal_normalization(self):
        m = build(ModelConfig("CnnGlobalAverage"), 2)
        m.normalization = NormalizationStats(np.full(45, 3.0), np.full(45, 2.0))
        raw = seq(40)
        shifted = FeatureSequence(raw.frames * 2 + 3)
        np.testing.assert_allclose(forward(m, shifted, normalize=True)[0], forward(m, raw)[0], rtol=1e-6)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_batched_padding_matches_single(self, models, variant):
        m = models[variant]
        a, b = seq(47, 1).frames, seq(40, 2).frames
        x = np.zeros((2, 47, 45), np.float32)
        x[0], x[1, :40] = a, b
        with ad.no_grad():
            batched = ad.softmax(m.logits(x, [47, 40])[0], axis=1).data
        np.testing.assert_allclose(batched[0], forward(m, seq(47, 1))[0], atol=1e-5)
        np.testing.assert_allclose(batched[1], forward(m, seq(40, 2))[0], atol=1e-5)


class TestCheckpoint:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_roundtrip_bit_exact(self, tmp_path, variant):
        m = build(ModelConfig(variant), 3)
        m.normalization = NormalizationStats(np.linspace(-1, 1, 45), np.linspace(0.5, 2, 45))
        save(m, tmp_path / "m.dsm")
        back = load(tmp_path / "m.dsm")
        assert back.config == m.config
        np.testing.assert_array_equal(back.normalization.mean, m.normalization.mean)
        np.testing.assert_array_equal(back.normalization.std, m.normalization.std)
        for (n, p), (nb, pb) in zip(m.named_parameters().items(), back.named_parameters().items()):
            assert n == nb and p.data.tobytes() == pb.data.tobytes()
        x = seq(60, 4)
        assert forward(m, x, True)[0].tobytes() == forward(back, x, True)[0].tobytes()

    def test_truncated(self, tmp_path):
        save(build(ModelConfig("CnnAttention"), 0), tmp_path / "m.dsm")
        data = (tmp_path / "m.dsm").read_bytes()
        for cut in (3, 100, len(data) - 5):
            (tmp_path / "t.dsm").write_bytes(data[:cut])
            with pytest.raises(CorruptionError):
                load(tmp_path / "t.dsm")

    def test_flipped_payload_byte(self, tmp_path):
        save(build(ModelConfig("CnnAttention"), 0), tmp_path / "m.dsm")
        data = bytearray((tmp_path / "m.dsm").read_bytes())
        data[-10] ^= 0xFF
        (tmp_path / "c.dsm").write_bytes(bytes(data))
        with pytest.raises(CorruptionError):
            load(tmp_path / "c.dsm")

    def test_version_mismatch(self, tmp_path):
        save(build(ModelConfig("CnnAttention"), 0), tmp_path / "m.dsm")
        data = (tmp_path / "m.dsm").read_bytes().replace(b'"format_version": 1', b'"format_version": 9')
        (tmp_path / "v.dsm").write_bytes(data)
        with pytest.raises(VersionError):
            load(tmp_path / "v.dsm")

    def test_variant_is_data(self, tmp_path):
        save(build(ModelConfig("CnnLstm"), 5), tmp_path / "m.dsm")
        assert load(tmp_path / "m.dsm").config.variant == "CnnLstm"
