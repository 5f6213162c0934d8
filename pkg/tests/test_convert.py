import numpy as np
import pytest

from snncal import ann
from snncal.convert import ConversionConfig, ThresholdPolicy, build_snn, init_thresholds, scale_weights
from snncal.errors import ConfigError, ThresholdError
from snncal.formats import save_snn
from snncal.harness import synth_dataset
from snncal.snn_sim import simulate

from .oracles import naive_mlp_snn


def _identity_model(n=1):
    return ann.AnnModel([ann.linear(np.eye(n), np.zeros(n)), ann.activation(), ann.linear(np.eye(n))], (n,))


def test_thresholds_max_and_percentile():
    data = (np.arange(1, 11) / 10).reshape(-1, 1)
    m = _identity_model()
    assert init_thresholds(m, data, ThresholdPolicy("max"))[0][0] == 1.0
    assert init_thresholds(m, data, ThresholdPolicy("percentile", 90))[0][0] == 0.9


def test_thresholds_per_channel():
    data = np.array([[0.5, 2.0], [0.1, 1.0]])
    th = init_thresholds(_identity_model(2), data, ThresholdPolicy("max", granularity="channel"))[0]
    assert np.array_equal(th, [0.5, 2.0])
    th = init_thresholds(_identity_model(2), data, ThresholdPolicy("max", granularity="layer"))[0]
    assert np.array_equal(th, [2.0, 2.0])


def test_thresholds_all_zero_layer():
    with pytest.raises(ThresholdError, match="layer 0"):
        init_thresholds(_identity_model(), -np.ones((4, 1)), ThresholdPolicy("max"))


def test_threshold_floor():
    data = np.array([[1.0, 0.0]])
    th = init_thresholds(_identity_model(2), data, ThresholdPolicy("max"))[0]
    assert th[1] == 1e-6


def test_percentile_below_max(rng):
    m = ann.build_cnn(seed=1, use_batchnorm=False)
    x = rng.random((20, 1, 8, 8))
    for a, b in zip(init_thresholds(m, x, ThresholdPolicy("percentile", 99)), init_thresholds(m, x, ThresholdPolicy("max"))):
        assert np.all(a <= b) and np.all(a > 0)


def test_policy_validation():
    with pytest.raises(ConfigError):
        ThresholdPolicy("median")
    with pytest.raises(ConfigError):
        ThresholdPolicy("percentile", 0)
    with pytest.raises(ConfigError):
        ConversionConfig(calibration_samples=0)


def test_scale_weights_formula():
    m = ann.AnnModel(
        [ann.linear(np.eye(2)), ann.activation(), ann.linear(np.eye(2)), ann.activation(), ann.linear(np.eye(2))], (2,)
    )
    scaled, unit = scale_weights(m, [np.full(2, 2.0), np.full(2, 4.0)])
    assert np.array_equal(scaled.layers[0].weight, 0.5 * np.eye(2))
    assert np.array_equal(scaled.layers[2].weight, 0.5 * np.eye(2))
    assert np.array_equal(scaled.layers[4].weight, 4.0 * np.eye(2))
    assert all(np.all(u == 1) for u in unit)


def test_scale_weights_identity(rng):
    m = ann.build_cnn(seed=2, use_batchnorm=False)
    scaled, _ = scale_weights(m, [np.ones(c) for c in m.channel_counts()])
    for a, b in zip(m.layers, scaled.layers):
        if a.weight is not None:
            assert np.array_equal(a.weight, b.weight)


def test_scale_weights_rejects_nonpositive():
    with pytest.raises(ValueError):
        scale_weights(_identity_model(), [np.array([0.0])])


@pytest.mark.parametrize("act", ["relu", "trelu", "stairs"])
def test_scaling_preserves_argmax(act, rng):
    m = ann.build_cnn(seed=3, use_batchnorm=False, act=act)
    x = rng.random((100, 1, 8, 8))
    th = init_thresholds(m, x, ThresholdPolicy("percentile", 99.0))
    scaled, _ = scale_weights(m, th)
    assert np.array_equal(m.predict(x), scaled.predict(x))
    if act == "relu":
        assert np.allclose(m.forward(x), scaled.forward(x), atol=1e-10)


def test_scaling_flattened_linear(rng):
    m = ann.AnnModel(
        [ann.conv2d(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2), 1, 1), ann.activation(),
         ann.linear(rng.normal(size=(3, 32)), rng.normal(size=3)), ann.activation(),
         ann.linear(rng.normal(size=(2, 3)))],
        (1, 4, 4),
    )
    x = rng.random((10, 1, 4, 4))
    th = init_thresholds(m, x, ThresholdPolicy("max"))
    scaled, _ = scale_weights(m, th)
    assert np.allclose(m.forward(x), scaled.forward(x), atol=1e-10)


def test_build_snn_matches_naive_network():
    data = synth_dataset(3, 5, 60, seed=0, separation=3.0)
    m = ann.train_sgd(ann.build_mlp(5, (6, 4), 3, seed=1), data, 3, 0.05, 0)
    snn = build_snn(m, ConversionConfig(ThresholdPolicy("max", granularity="channel")), data)
    L = snn.ann.layers
    W = [L[0].weight.tolist(), L[2].weight.tolist()]
    B = [L[0].bias.tolist(), L[2].bias.tolist()]
    th = [t.tolist() for t in snn.thresholds]
    for x in data.inputs[:5]:
        readouts, _ = simulate(snn, x, 12)
        ref = naive_mlp_snn(W, B, th, L[4].weight.tolist(), L[4].bias.tolist(), x.tolist(), 12)
        assert np.allclose(np.array(readouts), np.array(ref), atol=1e-12, rtol=0)


def test_build_snn_without_scaling(rng):
    data = rng.random((30, 1, 8, 8))
    m = ann.build_cnn(seed=4, use_batchnorm=False)
    cfg = ConversionConfig(ThresholdPolicy("max"), scale_weights=False)
    snn = build_snn(m, cfg, data)
    for a, b in zip(m.layers, snn.ann.layers):
        if a.weight is not None:
            assert np.array_equal(a.weight, b.weight)
    expected = init_thresholds(m, data[: cfg.calibration_samples], cfg.threshold_policy)
    assert all(np.array_equal(a, b) for a, b in zip(snn.thresholds, expected))
    assert snn.bias_table.horizon == 0


def test_build_snn_deterministic(tmp_path, rng):
    data = rng.random((30, 1, 8, 8))
    m = ann.build_cnn(seed=5)
    for name in ("a", "b"):
        save_snn(build_snn(m, ConversionConfig(), data), tmp_path / f"{name}.json")
    assert (tmp_path / "a.json").read_bytes().replace(b"a.bin", b"") == (tmp_path / "b.json").read_bytes().replace(b"b.bin", b"")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_rates_approach_clipped_activations(rng):
    data = synth_dataset(3, 5, 80, seed=1, separation=3.0)
    m = ann.train_sgd(ann.build_mlp(5, (8,), 3, seed=1), data, 3, 0.05, 0)
    snn = build_snn(m, ConversionConfig(), data)
    _, acts = ann.forward_collect(snn.ann, data.inputs)
    target = np.minimum(acts[0], 1.0)
    errs = {}
    for T in (16, 256):
        _, trace = simulate(snn, data.inputs, T, record=True)
        rate = np.sum(trace.spikes[0], axis=0) / T
        errs[T] = np.mean(np.abs(rate - target))
    assert errs[256] <= errs[16]
