import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deptex import tensor as T
from deptex.backbone import BackboneConfig
from deptex.errors import ConfigError, DataError, NumericalError
from deptex.head import HeadConfig, build_model
from deptex.tensor import Tensor
from deptex.trainer import (
    SGD, AugmentParams, ChannelStats, ConfusionMatrix, TrainConfig, apply_augment, evaluate, fit, load_checkpoint,
    lr_at, multiscale_expand, prepare_eval_inputs, prepare_train_patches, sample_augment, save_checkpoint, train_epoch,
)

TINY_BACKBONE = BackboneConfig(widths=[8, 16], blocks=[1, 1])


def tiny_cfg(**kw):
    base = dict(batch_size=8, epochs=4, decay_period=2, scales=[16], crop=16, train_input=16, eval_scale=16, eval_resize="square")
    base.update(kw)
    return TrainConfig(**base)


def tiny_data(n=16, k=4, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % k
    images = rng.uniform(size=(n, 3, 20, 20)) * 0.3 + labels[:, None, None, None] / k
    return images, labels


def test_paper_lr_schedule():
    assert [lr_at(0.01, 0.1, 10, e) for e in (0, 10, 20)] == pytest.approx([0.01, 0.001, 0.0001], rel=1e-12)


@given(st.integers(1, 60), st.integers(1, 60))
def test_lr_schedule_piecewise_constant(total, period):
    lrs = [lr_at(0.01, 0.1, period, e) for e in range(total)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert len(set(lrs)) == -(-total // period)


def _sgd(p0, **kw):
    p = Tensor(np.array([p0]), requires_grad=True)
    cfg = TrainConfig(**{"lr": 0.1, "momentum": 0.0, **kw})
    return p, SGD([("all", [("p", p)], 1.0)], cfg)


def test_single_step_on_half_square():
    p, opt = _sgd(1.0)
    (T.mul(p, p) * 0.5).sum().backward()
    opt.step(0)
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)


def test_zero_momentum_is_vanilla_sgd(rng):
    g = rng.normal(size=3)
    p = Tensor(rng.normal(size=3), requires_grad=True)
    start = p.data.copy()
    opt = SGD([("all", [("p", p)], 1.0)], TrainConfig(lr=0.05, momentum=0.0))
    for _ in range(3):
        p.grad = g.copy()
        opt.step(0)
    assert np.abs(p.data - (start - 3 * 0.05 * g)).max() < 1e-15


def test_heavy_ball_and_group_multiplier():
    p = Tensor(np.zeros(1), requires_grad=True)
    q = Tensor(np.zeros(1), requires_grad=True)
    opt = SGD([("a", [("p", p)], 1.0), ("b", [("q", q)], 10.0)], TrainConfig(lr=0.1, momentum=0.9))
    for _ in range(2):
        p.grad, q.grad = np.ones(1), np.ones(1)
        opt.step(0)
    # v1 = -0.1, v2 = 0.9 * -0.1 - 0.1
    assert p.data[0] == pytest.approx(-0.1 - 0.19, abs=1e-15)
    assert q.data[0] == pytest.approx(10 * (-0.1 - 0.19), abs=1e-13)
    assert all(opt.state[n].shape == t.shape for n, t in (("p", p), ("q", q)))


def test_non_finite_gradient_aborts_without_update():
    p, opt = _sgd(1.0)
    p.grad = np.array([np.nan])
    with pytest.raises(NumericalError, match="'p'"):
        opt.step(3)
    assert p.data[0] == 1.0


@pytest.mark.parametrize(
    "kw", [dict(lr=0), dict(batch_size=0), dict(decay_period=40, epochs=30), dict(momentum=-1), dict(scales=[]),
           dict(eval_resize="fit"), dict(eval_every=-1)],
)
def test_train_config_rejects(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_multiscale_expand():
    img = np.random.default_rng(0).uniform(size=(3, 50, 40))
    assert len(multiscale_expand(img, [32, 40, 48], 32)) == 3
    (full,) = multiscale_expand(img, [32], 32)
    assert full.shape == (3, 32, 32)
    (centre,) = multiscale_expand(img, [48], 32)
    from deptex import imaging
    np.testing.assert_array_equal(centre, imaging.resize_bilinear(img, 48, 48)[:, 8:40, 8:40])


def test_degenerate_augment_is_centre_resize():
    from deptex import imaging
    patch = np.random.default_rng(0).uniform(size=(3, 24, 24))
    out = apply_augment(patch, AugmentParams(), 16)
    np.testing.assert_allclose(out, imaging.resize_bilinear(patch, 16, 16), atol=1e-12)


def test_flip_twice_is_identity():
    patch = np.random.default_rng(0).uniform(size=(3, 16, 16))
    params = sample_augment(np.random.default_rng(5), flip_prob=1.0, shape=(16, 16))
    once = apply_augment(patch, params, 16)
    twice = apply_augment(once, AugmentParams(flip=True), 16)
    unflipped = apply_augment(patch, AugmentParams(params.area, params.aspect, params.top_frac, params.left_frac), 16)
    np.testing.assert_allclose(twice, unflipped, atol=1e-12)


def test_augment_crops_stay_inside_the_patch():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = sample_augment(rng, shape=(16, 24))
        if p == AugmentParams(flip=p.flip):
            continue  # fallback: a full crop, clamped by apply_augment
        area = p.area * 16 * 24
        assert np.sqrt(area * p.aspect) <= 24 + 1e-9 and np.sqrt(area / p.aspect) <= 16 + 1e-9


def test_standardized_training_statistics():
    images, labels = tiny_data(32)
    patches, _ = prepare_train_patches(images, labels, tiny_cfg())
    stats = ChannelStats.compute(patches)
    z = np.stack([stats.apply(p) for p in patches])
    assert np.abs(z.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(z.var(axis=(0, 2, 3)) - 1).max() < 1e-3
    assert ChannelStats.from_dict(json.loads(json.dumps(stats.to_dict()))).mean.tolist() == stats.mean.tolist()


def test_multiscale_patches_triple_the_set():
    images, labels = tiny_data(8)
    patches, plabels = prepare_train_patches(images, labels, tiny_cfg(scales=[16, 20, 24]))
    assert patches.shape == (24, 3, 16, 16)
    assert plabels.tolist() == np.repeat(labels, 3).tolist()


class _Constant:
    def __init__(self, k, cls):
        self.num_classes, self._cls = k, cls

    def eval(self):
        pass

    def __call__(self, x):
        out = np.zeros((len(x.data), self.num_classes))
        out[:, self._cls] = 1.0
        return Tensor(out)


class _Oracle(_Constant):
    def __call__(self, x):
        return Tensor(np.eye(self.num_classes)[x.data[:, 0].astype(int)])


def test_evaluate_examples():
    y = np.repeat(np.arange(4), 5)
    acc, cm = evaluate(_Oracle(4, 0), y[:, None].astype(float), y)
    assert acc == 1.0 and (cm.counts == np.diag([5] * 4)).all()
    acc, cm = evaluate(_Constant(4, 2), np.zeros((20, 1)), y)
    assert acc == 0.25
    assert cm.counts[:, 2].tolist() == [5] * 4 and cm.counts.sum() == cm.counts[:, 2].sum()
    with pytest.raises(DataError):
        evaluate(_Constant(4, 0), np.zeros((0, 1)), [])
    with pytest.raises(DataError):
        evaluate(_Constant(4, 0), np.zeros((1, 1)), [4])


def test_confusion_csv_roundtrip(tmp_path):
    cm = ConfusionMatrix(np.array([[3, 1], [0, 4]]), ["brick", "grass"])
    cm.to_csv(tmp_path / "cm.csv", config_hash="abc123")
    back = ConfusionMatrix.from_csv(tmp_path / "cm.csv")
    assert back.counts.tolist() == [[3, 1], [0, 4]] and back.class_names == ["brick", "grass"]
    assert back.config_hash == "abc123"
    assert back.permuted([1, 0]).counts.tolist() == [[4, 0], [1, 3]]
    (tmp_path / "bad.csv").write_text("true\\pred,a,b\na,1\n")
    with pytest.raises(DataError):
        ConfusionMatrix.from_csv(tmp_path / "bad.csv")


def _run(tmp_path, epochs, resume_from=None, variant="dep"):
    images, labels = tiny_data()
    cfg = tiny_cfg(epochs=epochs, decay_period=min(2, epochs))
    patches, plabels = prepare_train_patches(images, labels, cfg)
    stats = ChannelStats.compute(patches)
    model = build_model(TINY_BACKBONE, HeadConfig(variant=variant, codewords=2, texture_dim=4, spatial_dim=4, fc2_dim=8, enc_codewords=2, enc_channels=4), 4, 0)
    opt = SGD(model.param_groups(cfg.head_lr_mult), cfg)
    state = None
    if resume_from is not None:
        state, _ = load_checkpoint(resume_from, model, opt)
    ex = prepare_eval_inputs(images, cfg, stats)
    state = fit(model, patches, plabels, cfg, stats, ex, labels, opt=opt, state=state)
    return model, opt, state


def test_training_is_bit_reproducible(tmp_path):
    a, _, sa = _run(tmp_path, 2)
    b, _, sb = _run(tmp_path, 2)
    assert sa.history == sb.history
    for (_, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert x.tobytes() == y.tobytes()


def test_resume_matches_uninterrupted(tmp_path):
    full, _, sfull = _run(tmp_path, 4)
    half, opt, shalf = _run(tmp_path, 2)
    cfg = tiny_cfg(epochs=2)
    save_checkpoint(tmp_path / "ck", half, opt, shalf, cfg, "h")
    # the resumed run rebuilds the model from scratch and continues at epoch 2
    resumed, _, sres = _run(tmp_path, 4, resume_from=tmp_path / "ck")
    assert [r["train_loss"] for r in sres.history] == [r["train_loss"] for r in sfull.history]
    for (_, x), (_, y) in zip(full.state_dict().items(), resumed.state_dict().items()):
        assert x.tobytes() == y.tobytes()


def test_checkpoint_sidecar(tmp_path):
    model, opt, state = _run(tmp_path, 1)
    save_checkpoint(tmp_path / "ck", model, opt, state, tiny_cfg(epochs=1, decay_period=1), "deadbeef", {"variant": "dep"})
    sidecar = json.loads((tmp_path / "ck" / "state.json").read_text())
    assert sidecar["epoch"] == 1 and sidecar["config_hash"] == "deadbeef" and sidecar["meta"] == {"variant": "dep"}
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nothing", model)


def test_eval_every_zero_evaluates_last_epoch_only():
    images, labels = tiny_data()
    cfg = tiny_cfg(epochs=3, decay_period=3, eval_every=0)
    patches, plabels = prepare_train_patches(images, labels, cfg)
    stats = ChannelStats.compute(patches)
    model = build_model(TINY_BACKBONE, HeadConfig.mini("gap"), 4, 0)
    state = fit(model, patches, plabels, cfg, stats, prepare_eval_inputs(images, cfg, stats), labels)
    assert [r["eval_acc"] is None for r in state.history] == [True, True, False]


@pytest.mark.parametrize("variant", ["dep", "gap", "encoding"])
def test_memorizes_32_samples(variant):
    # lr 0.02: the encoding head classifies a unit-norm vector and needs its
    # weights to grow before the loss can reach 0.01; at 0.01 it takes ~200 epochs.
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 3, 32, 32))
    y = np.arange(32) % 4
    cfg = TrainConfig(lr=0.02, batch_size=32, epochs=200, decay_period=200, augment=False, scales=[32], crop=32,
                      train_input=32, eval_scale=32)
    model = build_model(BackboneConfig.mini((32, 32)), HeadConfig.mini(variant), 4, 0)
    opt = SGD(model.param_groups(cfg.head_lr_mult), cfg)
    stats = ChannelStats(np.zeros(3), np.ones(3))
    for epoch in range(cfg.epochs):
        loss = train_epoch(model, opt, x, y, cfg, stats, epoch)
        if loss < 0.01:
            break
    assert loss < 0.01, f"{variant}: loss {loss:.4f} after {epoch + 1} epochs"
