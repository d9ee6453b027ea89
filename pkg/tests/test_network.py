"""Trainer components: batch norm oracle, STE gradients, training behavior."""

import json

import numpy as np
import pytest

from gradcheck_util import check_gradients
from ditherbnn import dataio
from ditherbnn.network import (BatchNorm, BinaryCNN, Conv2d, DeSignAct,
                               ModelConfig, SignAct, evaluate, load_checkpoint,
                               restore_state_bytes, save_checkpoint,
                               softmax_ce, state_bytes, train)
from ditherbnn.threshold_design import build_levels
from ditherbnn.threshold_scale import (half_gaussian_kmeans, kernel_to_json,
                                       scale_kernel)
from ditherbnn.threshold_design import ThresholdKernel


@pytest.fixture(scope="module")
def kernel_file(tmp_path_factory):
    """A scaled threshold kernel file for the design activations."""
    levels = build_levels(3)
    t = ThresholdKernel(np.array([[1, 1], [3, 3]]), levels)
    q = half_gaussian_kmeans(levels.n, seed=0)
    doc = kernel_to_json(t, scaled=scale_kernel(t, q, levels), q=q)
    path = tmp_path_factory.mktemp("kern") / "kernel.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_config_validation(kernel_file):
    with pytest.raises(ValueError):
        ModelConfig(activation="tanh")
    with pytest.raises(ValueError):
        ModelConfig(bn_setting="1/1")
    with pytest.raises(ValueError):
        ModelConfig(activation="design2d")  # no threshold file
    cfg = ModelConfig(activation="design2d", thresholds=kernel_file)
    back = ModelConfig.from_json(cfg.to_json())
    assert back == cfg and back.hash() == cfg.hash()


def test_batchnorm_scalar_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4, 5, 6)).astype(np.float32)
    bn = BatchNorm(3, "beta/gamma")
    bn.gamma.value[:] = [1.0, 2.0, 0.5]
    bn.beta.value[:] = [0.0, -1.0, 0.3]
    out = bn.forward(x, training=True)
    for c in range(3):
        mu = x[c].mean()
        var = x[c].var()
        expect = (x[c] - mu) / np.sqrt(var + bn.eps) * bn.gamma.value[c] \
            + bn.beta.value[c]
        np.testing.assert_allclose(out[c], expect, atol=1e-6)


def test_batchnorm_learnable_flags():
    for setting, nparams in [("0/1", 0), ("beta/1", 1), ("0/gamma", 1),
                             ("beta/gamma", 2)]:
        assert len(BatchNorm(4, setting).params()) == nparams


def test_batchnorm_running_stats_track_batches():
    rng = np.random.default_rng(1)
    bn = BatchNorm(2, "0/1", momentum=0.5)
    x = (rng.standard_normal((2, 8, 4, 4)) * 3 + 1).astype(np.float32)
    bn.forward(x, training=True)
    m = x.mean(axis=(1, 2, 3))
    v = x.var(axis=(1, 2, 3))
    np.testing.assert_allclose(bn.mu, 0.5 * m, atol=1e-6)
    np.testing.assert_allclose(bn.var, 0.5 * 1.0 + 0.5 * v, atol=1e-5)


def test_binary_conv_weights_are_pm1():
    rng = np.random.default_rng(2)
    conv = Conv2d(3, 4, 3, rng, binary=True)
    w = conv.effective_weights()
    assert set(np.unique(w)) <= {-1.0, 1.0}
    real = Conv2d(3, 4, 3, rng, binary=False)
    assert real.effective_weights() is real.w.value


def test_sign_act_values_and_ste():
    act = SignAct()
    x = np.array([[[[-2.0, -0.5, 0.0, 0.5, 2.0]]]], dtype=np.float32)
    out = act.forward(x)
    np.testing.assert_array_equal(out, [[[[-1, -1, 1, 1, 1]]]])
    g = act.backward(np.ones_like(x))
    np.testing.assert_array_equal(g, [[[[0, 1, 1, 1, 0]]]])


def test_design_act_zero_thresholds_equals_sign():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 6, 6)).astype(np.float32)
    sign = SignAct()
    design = DeSignAct([np.zeros((2, 2))])
    np.testing.assert_array_equal(design.forward(x), sign.forward(x))
    g = rng.standard_normal(x.shape).astype(np.float32)
    np.testing.assert_array_equal(design.backward(g), sign.backward(g))


def test_design_act_gamma_floor():
    act = DeSignAct([np.array([[0.5, 1.0], [1.0, 0.5]])])
    act.gamma = np.array([-2.0, 3.0], dtype=np.float32)
    th = act.thresholds(2, 4, 4)
    # negative gamma is clamped to the floor instead of flipping thresholds
    assert np.all(th[0] > 0)
    np.testing.assert_allclose(th[0], 1e-3 * th[1] / 3.0, rtol=1e-5)


@pytest.mark.parametrize("activation,bn_setting", [
    ("sign", "beta/gamma"),
    ("relu", "0/gamma"),
    ("design3d-s", "0/1"),
])
def test_gradients_match_finite_differences(activation, bn_setting, kernel_file):
    thresholds = kernel_file if activation.startswith("design") else None
    cfg = ModelConfig(channels=(4, 6), k=3, activation=activation,
                      bn_setting=bn_setting, thresholds=thresholds,
                      num_classes=2, in_channels=2, image_size=8, seed=3)
    model = BinaryCNN(cfg)
    rng = np.random.default_rng(0)
    x = (rng.standard_normal((4, 2, 8, 8)) * 0.3).astype(np.float32)
    y = np.array([0, 1, 1, 0])
    results = check_gradients(model, x, y, rng)
    assert len(results) >= 20
    worst = max(err for _, _, err in results)
    assert worst < 1e-3, f"worst guarded rel err {worst}"


def test_overfits_small_synthetic_set():
    data = dataio.synth_dataset(32, classes=2, seed=0, size=16)
    cfg = ModelConfig(channels=(8, 16), activation="sign", bn_setting="beta/gamma",
                      num_classes=2, image_size=16, seed=0, epochs=60,
                      batch_size=16, lr=3e-3)
    model, report, _ = train(cfg, data)
    assert report.rows[-1][1] >= 0.95  # train accuracy


def test_evaluate_recount_oracle():
    data = dataio.synth_dataset(24, classes=3, seed=1, size=16)
    cfg = ModelConfig(channels=(4,), activation="sign", bn_setting="0/1",
                      num_classes=3, image_size=16, seed=1, epochs=1,
                      batch_size=12)
    model, _, _ = train(cfg, data)
    from ditherbnn.network import to_arrays
    x, y = to_arrays(data.test, data.stats)
    acc = evaluate(model, x, y, batch_size=5)
    logits = model.forward(x, training=False)
    assert acc == pytest.approx((logits.argmax(axis=1) == y).mean())


def test_training_is_seed_deterministic():
    data = dataio.synth_dataset(20, classes=2, seed=2, size=16)
    cfg = ModelConfig(channels=(4,), activation="sign", bn_setting="0/1",
                      num_classes=2, image_size=16, seed=7, epochs=2,
                      batch_size=10)
    _, r1, _ = train(cfg, data)
    _, r2, _ = train(cfg, data)
    assert r1.rows == r2.rows


def test_checkpoint_roundtrip(tmp_path):
    data = dataio.synth_dataset(20, classes=2, seed=3, size=16)
    cfg = ModelConfig(channels=(4, 8), activation="sign", bn_setting="beta/gamma",
                      num_classes=2, image_size=16, seed=4, epochs=2,
                      batch_size=10)
    model, _, best = train(cfg, data)
    path = tmp_path / "model.npz"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.config == cfg
    from ditherbnn.network import to_arrays
    x, y = to_arrays(data.test, data.stats)
    np.testing.assert_array_equal(back.forward(x), model.forward(x))
    # best-state bytes restore cleanly too
    restore_state_bytes(back, best)
    assert state_bytes(back) == best


def test_softmax_ce_matches_manual():
    logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]])
    y = np.array([0, 2])
    loss, d = softmax_ce(logits, y)
    p0 = np.exp(logits[0]) / np.exp(logits[0]).sum()
    expect = (-np.log(p0[0]) - np.log(1 / 3)) / 2
    assert loss == pytest.approx(expect)
    np.testing.assert_allclose(d.sum(axis=1), 0.0, atol=1e-12)
