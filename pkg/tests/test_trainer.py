import dataclasses

import numpy as np
import pytest

from lmpkit.errors import TrainingDiverged
from lmpkit.gradcheck import max_rel_error, numeric_grad
from lmpkit.pooling import PoolingKernel, PoolKind, pool_backward, pool_forward
from lmpkit.selection import SelectionConfig
from lmpkit.synth import SceneSpec, SyntheticScene, generate_dataset, generate_scene
from lmpkit.tensor_core import linear_bwd, linear_fwd, softmax_xent_bwd, softmax_xent_fwd
from lmpkit.trainer import (Architecture, ToyModel, TrainConfig, aligned_pads, count_flops, grid_to_pixel,
                            load_checkpoint, predict_keypoints, save_checkpoint, train,
                            write_history_csv)

SMALL = dict(widths=(4, 6, 8), strides=(1, 2, 2))


def small_data(n_per_class=4, seed=0):
    return generate_dataset(SceneSpec(), n_per_class, seed)


def away_from_kinks(model, x, margin=1e-3):
    """True if no ReLU input and no pooling runner-up lies within ``margin`` of a switch."""
    _, cache = model.forward(x)
    if any(np.abs(z).min() < margin for _, z in cache["convs"]):
        return False
    feat = cache["feat"]
    top2 = np.sort(feat.reshape(feat.shape[0] * feat.shape[1], -1), axis=1)[:, -2:]
    return bool(np.all(top2[:, 1] - top2[:, 0] > margin))


@pytest.mark.parametrize("kind", list(PoolKind))
def test_model_gradients(rng, kind):
    arch = Architecture(widths=(3, 4, 5), strides=(1, 2, 2), num_classes=3)
    model = ToyModel.initialize(arch, PoolingKernel(kind, 0.1), 1, conv_bias=0.05)
    x = rng.normal(size=(2, 1, 12, 12))
    while not away_from_kinks(model, x):
        x = rng.normal(size=(2, 1, 12, 12))
    y = np.array([0, 2])
    _, _, grads, _ = model.loss_and_grads(x, y)
    for name, p in model.params.items():
        num = numeric_grad(lambda: model.loss(x, y), p)
        assert max_rel_error(grads[name], num) < 1e-6, name


def test_lr_zero_leaves_params_unchanged():
    train_set, _ = small_data()
    cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=0.0, **SMALL)
    res = train(cfg, train_set)
    init = ToyModel.initialize(res.model.arch, cfg.pooling, np.random.SeedSequence([0, 0]))
    for name, p in init.params.items():
        np.testing.assert_array_equal(res.model.params[name], p)


def test_single_sample_memorized():
    scene = generate_scene(SceneSpec(), 1, 0)
    cfg = TrainConfig(epochs=200, batch_size=1, pooling_kind="avg", **SMALL)
    res = train(cfg, [scene], num_classes=4)
    assert res.history[-1]["loss"] < 0.01


def test_training_is_deterministic():
    train_set, test_set = small_data()
    cfg = TrainConfig(epochs=2, batch_size=4, enable_maskout=True, maskout_start_epoch=1, **SMALL)
    a, b = train(cfg, train_set, test_set), train(cfg, train_set, test_set)
    for net_a, net_b in ((a.model, b.model), (a.replica, b.replica)):
        for name in net_a.params:
            assert net_a.params[name].tobytes() == net_b.params[name].tobytes()
    assert a.history == b.history


def test_replica_does_not_touch_primary():
    train_set, _ = small_data()
    cfg = TrainConfig(epochs=2, batch_size=4, enable_maskout=True, maskout_start_epoch=1, **SMALL)
    with_replica = train(cfg, train_set)
    alone = train(dataclasses.replace(cfg, enable_maskout=False), train_set)
    for name, p in alone.model.params.items():
        np.testing.assert_array_equal(with_replica.model.params[name], p)
    init = ToyModel.initialize(with_replica.replica.arch, cfg.pooling, np.random.SeedSequence([0, 1]))
    assert any(not np.array_equal(init.params[n], with_replica.replica.params[n]) for n in init.params)
    assert {r["net"] for r in with_replica.history} == {"primary", "replica"}


def test_maskout_schedule():
    train_set, test_set = small_data()
    cfg = TrainConfig(epochs=3, batch_size=8, enable_maskout=True, maskout_start_epoch=2, **SMALL)
    hist = train(cfg, train_set, test_set).history
    replica_epochs = sorted({r["epoch"] for r in hist if r["net"] == "replica"})
    assert replica_epochs == [2, 3]


def test_divergence_reports_step():
    train_set, _ = small_data()
    cfg = TrainConfig(epochs=5, batch_size=4, learning_rate=1e6, **SMALL)
    with pytest.raises(TrainingDiverged) as err:
        train(cfg, train_set)
    assert err.value.step >= 0


def test_invalid_config():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        train(TrainConfig(), [])


def test_history_csv(tmp_path):
    train_set, test_set = small_data()
    res = train(TrainConfig(epochs=1, batch_size=8, **SMALL), train_set, test_set)
    write_history_csv(tmp_path / "h.csv", res.history)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss,acc,net"
    assert [l.split(",")[1] for l in lines[1:]] == ["train", "test"]


def test_lmp_gradient_sign(rng):
    kernel = PoolingKernel(PoolKind.LEAKY_MAX, 0.1)
    for _ in range(50):
        feat = np.abs(rng.normal(size=(1, 3, 4, 4)))
        w, b = rng.normal(size=(4, 3)), rng.normal(size=4)
        pooled, ctx = pool_forward(feat, kernel)
        _, probs = softmax_xent_fwd(linear_fwd(pooled, w, b), np.array([1]))
        g_pooled = linear_bwd(pooled, w, softmax_xent_bwd(probs, np.array([1])))[0]
        g = pool_backward(g_pooled, ctx, kernel).reshape(3, -1)
        for ch in range(3):
            if g_pooled[0, ch] == 0:
                continue
            top = ctx.argmax_index[0, ch]
            others = np.delete(g[ch], top)
            assert np.all(np.sign(others) == -np.sign(g[ch, top]))
            np.testing.assert_allclose(others, -0.1 * g[ch, top])


# --- keypoints ------------------------------------------------------------------


def test_zero_model_predicts_nothing():
    model = ToyModel.initialize(Architecture(), PoolingKernel(PoolKind.LEAKY_MAX), 0)
    for name in model.params:
        model.params[name][...] = 0.0
    image = generate_scene(SceneSpec(), 0, 0).image
    assert predict_keypoints(model, None, image) == []
    assert predict_keypoints(model, model.copy(), image) == []


def plus_detector():
    """Single-channel net whose only live unit sits on the center of a 'cross' glyph."""
    arch = Architecture(widths=(1, 1, 1), strides=(1, 2, 2), num_classes=2)
    model = ToyModel.initialize(arch, PoolingKernel(PoolKind.LEAKY_MAX), 0)
    plus = np.array([[-1.0, 1, -1], [1, 1, 1], [-1, 1, -1]])
    model.params["conv0_w"][0, 0] = plus
    model.params["conv0_b"][:] = -4.5
    for i in (1, 2):
        model.params[f"conv{i}_w"][0, 0] = 1.0
        model.params[f"conv{i}_b"][:] = 0.0
    return model


def test_constructed_filter_oracle():
    spec = SceneSpec(num_classes=1, unique_patterns_per_class=1, num_unique_per_image=1,
                     num_repeated_distractors=0, noise_sigma=0.0, unique_glyphs=("cross",))
    model = plus_detector()
    for seed in range(25):
        scene = generate_scene(spec, 0, seed)
        kps = predict_keypoints(model, None, scene.image, SelectionConfig(keep_count=1))
        assert len(kps) == 1
        (r, c), = scene.keypoints
        assert np.hypot(kps[0][0] - r, kps[0][1] - c) <= model.arch.feature_stride


def test_prediction_length_bounded():
    train_set, test_set = small_data()
    res = train(TrainConfig(epochs=1, batch_size=8, enable_maskout=True, maskout_start_epoch=1,
                            **SMALL), train_set)
    for scene in test_set:
        for rep in (None, res.replica):
            assert len(predict_keypoints(res.model, rep, scene.image, SelectionConfig(keep_count=4))) <= 5


def test_grid_to_pixel():
    assert grid_to_pixel((0, 0), 4) == (2.0, 2.0)
    assert grid_to_pixel((7, 3), 4) == (30.0, 14.0)


# --- FLOPs ----------------------------------------------------------------------


def test_flops_default_model():
    model = ToyModel.initialize(Architecture(), PoolingKernel(PoolKind.LEAKY_MAX), 0)
    rep = count_flops(model, (1, 32, 32))
    conv0 = 16 * 1 * 9 * 32 * 32
    conv1 = 32 * 16 * 9 * 16 * 16
    conv2 = 32 * 32 * 9 * 8 * 8
    pool, fc = 32 * 64, 32 * 4
    assert dict(rep.layers) == {"conv0": conv0, "conv1": conv1, "conv2": conv2, "pool": pool, "fc": fc}
    assert rep.total == conv0 + conv1 + conv2 + pool + fc == 1_919_104
    assert rep.pooling == 2048
    assert rep.pooling_overhead_fraction == pool / rep.total < 0.01


def test_flops_single_conv():
    arch = Architecture(widths=(1,), strides=(1,), num_classes=1)
    model = ToyModel.initialize(arch, PoolingKernel(PoolKind.MAX), 0)
    assert dict(count_flops(model, (1, 8, 8)).layers)["conv0"] == 576


def test_flops_scale_with_batch():
    model = ToyModel.initialize(Architecture(), PoolingKernel(PoolKind.AVERAGE), 0)
    assert count_flops(model, (3, 1, 32, 32)).total == 3 * count_flops(model, (1, 32, 32)).total


# --- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = ToyModel.initialize(Architecture(), PoolingKernel(PoolKind.LEAKY_MAX, 0.01), 3)
    save_checkpoint(model, tmp_path / "ck", cfg_echo={"seed": 3}, epoch=10, seed=3)
    back = load_checkpoint(tmp_path / "ck")
    assert back.arch == model.arch and back.pooling == model.pooling
    for name, p in model.params.items():
        np.testing.assert_array_equal(back.params[name], p.astype(np.float32).astype(np.float64))


def test_checkpoint_without_bias(tmp_path):
    model = ToyModel.initialize(Architecture(conv_bias=False), PoolingKernel(PoolKind.MAX), 3)
    assert "conv0_b" not in model.params
    save_checkpoint(model, tmp_path)
    x = np.zeros((1, 1, 32, 32))
    x[0, 0, 10:15, 4:9] = 1.0
    np.testing.assert_allclose(load_checkpoint(tmp_path).forward(x)[0], model.forward(x)[0], rtol=1e-5)


# --- geometry and init ------------------------------------------------------------


def test_aligned_pads_default():
    assert aligned_pads(3, (1, 2, 2)) == ((1, 1), (1, 1), (0, 2))
    assert aligned_pads(3, (1,)) == ((1, 1),)
    assert Architecture().grid_shapes(32, 32) == [(32, 32), (16, 16), (8, 8)]


@pytest.mark.parametrize("strides", [(1, 2, 2), (2, 2, 2), (1, 2)])
def test_receptive_field_centre_matches_pixel_map(strides):
    # With all-ones kernels the influence of input pixels on a unit is
    # symmetric about its receptive-field centre, which must coincide with
    # the grid-to-pixel map.
    arch = Architecture(widths=(1,) * len(strides), strides=strides, conv_bias=False)
    model = ToyModel.initialize(arch, PoolingKernel(PoolKind.MAX), 0)
    for name in model.params:
        if name.startswith("conv"):
            model.params[name][...] = 1.0
    size = 64
    gh = arch.grid_shapes(size, size)[-1][0]
    stride = arch.feature_stride
    for cell in range(1, gh - 1):
        influence = np.zeros(size)
        for col in range(size):
            x = np.zeros((1, 1, size, size))
            x[0, 0, size // 2, col] = 1.0
            influence[col] = model.features(x)[0, 0, :, cell].sum()
        centre = (influence * np.arange(size)).sum() / influence.sum()
        assert centre == grid_to_pixel((0, cell), stride)[1]


def test_calibrated_biases_hit_target_fraction(rng):
    model = ToyModel.initialize(Architecture(), PoolingKernel(PoolKind.LEAKY_MAX), 0)
    x = rng.normal(size=(16, 1, 32, 32))
    model.calibrate_biases(x, 0.1)
    assert abs((model.features(x) > 0).mean() - 0.1) < 0.01
    with pytest.raises(ValueError):
        model.calibrate_biases(x, 0.0)
