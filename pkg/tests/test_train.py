"""Loss weighting, optimizer rules, schedule, and the training loop."""

import numpy as np
import pytest

from skiff.heads import LossBundle
from skiff.model import ModelConfig, build_model
from skiff.rng import Rng
from skiff.synth import SynthConfig, generate_dataset
from skiff.tensor import Tensor, backward
from skiff.train import (
    LOSS_ORDER,
    MANUAL_ORDER,
    NanLossError,
    Sgd,
    TrainConfig,
    UncertaintyParams,
    cosine_lr,
    manual_combine,
    metrics_line,
    prepare_sample,
    train,
    uncertainty_combine,
)

TINY_MODEL = dict(image_size=32, dims=(8, 8, 12, 16), blocks=(1, 1, 1, 1),
                  heads=(2, 2, 2, 2), center_grids=(4, 2, 1, 1), neck_dim=8)


def _bundle(values):
    ts = {k: Tensor(np.asarray(v), requires_grad=True) for k, v in values.items()}
    return LossBundle(ts["l_cls"], ts["l_conf"], ts["l_seg"], ts["l_box"])


def _tiny_scenes(n, seed=3):
    return generate_dataset(seed, n, SynthConfig(image_size=32))


# ---------------------------------------------------------------------------
# loss combination
# ---------------------------------------------------------------------------


def test_uncertainty_zero_s_is_plain_sum():
    vals = {"l_cls": 0.73, "l_conf": 1.91, "l_seg": 1.13, "l_box": 0.42}
    bundle = _bundle(vals)
    total = uncertainty_combine(bundle, Tensor(np.zeros(4), requires_grad=True))
    want = ((vals["l_cls"] + vals["l_conf"]) + vals["l_seg"]) + vals["l_box"]
    assert total.item() == want  # exact: exp(0) = 1 and the 0.5*s term is 0


def test_uncertainty_stationary_at_log_two_l():
    rng = np.random.default_rng(0)
    for _ in range(20):
        vals = {k: float(rng.uniform(0.05, 4.0)) for k in LOSS_ORDER}
        bundle = _bundle(vals)
        s = Tensor(np.log([2.0 * vals[k] for k in LOSS_ORDER]), requires_grad=True)
        total = uncertainty_combine(bundle, s)
        backward(total)
        assert np.abs(s.grad).max() < 1e-8


def test_uncertainty_loss_gradient_is_inverse_variance():
    vals = {"l_cls": 1.0, "l_conf": 1.0, "l_seg": 1.0, "l_box": 1.0}
    bundle = _bundle(vals)
    s = Tensor(np.array([0.0, np.log(2.0), np.log(4.0), -np.log(2.0)]),
               requires_grad=True)
    backward(uncertainty_combine(bundle, s))
    assert bundle.l_cls.grad == pytest.approx(1.0)
    assert bundle.l_conf.grad == pytest.approx(0.5)
    assert bundle.l_seg.grad == pytest.approx(0.25)
    assert bundle.l_box.grad == pytest.approx(2.0)


def test_manual_combine_order():
    vals = {"l_cls": 0.1, "l_conf": 0.2, "l_seg": 0.3, "l_box": 0.4}
    total = manual_combine(_bundle(vals), (2.0, 3.0, 5.0, 7.0))
    # weights follow (box, conf, cls, seg)
    assert total.item() == pytest.approx(2 * 0.4 + 3 * 0.2 + 5 * 0.1 + 7 * 0.3)
    assert MANUAL_ORDER == ("l_box", "l_conf", "l_cls", "l_seg")


def test_train_config_validation():
    with pytest.raises(ValueError, match="weighting"):
        TrainConfig(weighting="fixed")
    with pytest.raises(ValueError, match="manual_weights"):
        TrainConfig(manual_weights=(1.0, 2.0))
    with pytest.raises(ValueError, match="manual_weights"):
        TrainConfig(manual_weights=(1.0, -1.0, 1.0, 1.0))


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def test_cosine_schedule_shape():
    assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
    assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
    assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0)
    lrs = [cosine_lr(0.1, k, 100) for k in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(0.1, 5, 0) == 0.1  # degenerate horizon falls back to lr0


def test_sgd_weight_decay_rank_rule():
    w = Tensor(np.full((2, 2), 2.0), requires_grad=True)
    b = Tensor(np.full(2, 2.0), requires_grad=True)
    opt = Sgd([("w", w), ("b", b)], momentum=0.0, weight_decay=0.1)
    w.grad = np.zeros((2, 2))
    b.grad = np.zeros(2)
    opt.step(lr=1.0)
    np.testing.assert_allclose(w.data, 2.0 - 0.1 * 2.0)  # decayed
    np.testing.assert_allclose(b.data, 2.0)  # rank-1: untouched


def test_sgd_momentum_accumulates():
    x = Tensor(np.zeros((1, 1)), requires_grad=True)
    opt = Sgd([("x", x)], momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        x.grad = np.ones((1, 1))
        opt.step(lr=1.0)
    # v1 = 1, v2 = 0.9 + 1 -> x = -(1 + 1.9)
    assert x.data[0, 0] == pytest.approx(-2.9)


def test_sgd_grad_norm_includes_decay():
    w = Tensor(np.full((1, 1), 3.0), requires_grad=True)
    opt = Sgd([("w", w)], momentum=0.0, weight_decay=0.1)
    w.grad = np.full((1, 1), 4.0)
    norm = opt.step(lr=0.0)
    assert norm == pytest.approx(4.0 + 0.1 * 3.0)


def test_sgd_zero_grad():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    w.grad = np.ones((2, 2))
    Sgd([("w", w)], 0.9, 0.0).zero_grad()
    assert w.grad is None


# ---------------------------------------------------------------------------
# sample preparation
# ---------------------------------------------------------------------------


def test_prepare_sample_layout():
    scene = _tiny_scenes(1)[0]
    cfg = ModelConfig(**TINY_MODEL)
    sample = prepare_sample(scene, cfg)
    assert sample.image.shape == (3, 32, 32)
    assert sample.revp.shape == (4, 32, 32)
    assert sample.gt_boxes.shape == (len(scene.boxes), 4)
    # detector ids are 0-based while scene masks label objects from 1
    assert set(sample.gt_classes) <= {0, 1, 2}
    for b, cls in zip(scene.boxes, sample.gt_classes):
        assert cls == b.class_id - 1
    assert sample.sem_mask.dtype == np.int64


def test_prepare_sample_size_mismatch():
    scene = _tiny_scenes(1)[0]
    with pytest.raises(ValueError, match="size"):
        prepare_sample(scene, ModelConfig())  # 64 configured, 32 provided


def test_single_frame_ablation_uses_fewer_returns():
    scene = _tiny_scenes(1)[0]
    multi = prepare_sample(scene, ModelConfig(**TINY_MODEL))
    single = prepare_sample(scene, ModelConfig(**TINY_MODEL, multi_frame=False))
    assert (single.revp.data != 0).sum() <= (multi.revp.data != 0).sum()


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def test_metrics_line_format():
    m = {"step": 7, "l_cls": 0.1, "l_conf": 0.25, "l_seg": 1.0 / 3.0, "l_box": 0.5,
         "total": 1.18333333333, "grad_norm": 2.0, "lr": 0.01}
    line = metrics_line(m, np.array([0.0, 0.1, -0.2, 0.3]))
    fields = line.split("\t")
    assert len(fields) == 11
    assert fields[0] == "7"
    assert fields[3] == f"{1.0 / 3.0:.10g}"
    assert fields[6] == "0"
    assert fields[10] == "0.01"


def test_train_short_run_deterministic(tmp_path):
    scenes = _tiny_scenes(3)
    cfg = TrainConfig(steps=3, batch_size=2, seed=5)
    histories, params = [], []
    for run in range(2):
        model = build_model(ModelConfig(**TINY_MODEL))
        hist = train(model, scenes, cfg,
                     metrics_path=str(tmp_path / f"m{run}.tsv"))
        histories.append(hist)
        params.append({n: p.data.copy() for n, p in model.named_parameters()})
    assert [m["total"] for m in histories[0]] == [m["total"] for m in histories[1]]
    for name in params[0]:
        np.testing.assert_array_equal(params[0][name], params[1][name])
    assert (tmp_path / "m0.tsv").read_text() == (tmp_path / "m1.tsv").read_text()


def test_train_history_and_metrics_file(tmp_path):
    scenes = _tiny_scenes(2)
    model = build_model(ModelConfig(**TINY_MODEL))
    path = tmp_path / "metrics.tsv"
    hist = train(model, scenes, TrainConfig(steps=2, batch_size=2), str(path))
    assert len(hist) == 2
    for k, m in enumerate(hist):
        assert m["step"] == k
        assert m["lr"] == cosine_lr(0.01, k, 2)
        assert {"l_cls", "l_conf", "l_seg", "l_box", "total", "grad_norm",
                "s1", "s2", "s3", "s4"} <= set(m)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 2
    assert all(len(line.split("\t")) == 11 for line in lines)


def test_train_callback_early_stop():
    scenes = _tiny_scenes(2)
    model = build_model(ModelConfig(**TINY_MODEL))
    seen = []

    def stop_at_second(step, mdl, history):
        seen.append(step)
        return len(history) >= 2

    hist = train(model, scenes, TrainConfig(steps=10, batch_size=1),
                 callback=stop_at_second, callback_every=1)
    assert len(hist) == 2
    assert seen == [0, 1]
    # the schedule still spans the configured horizon
    assert hist[1]["lr"] == cosine_lr(0.01, 1, 10)


def test_train_manual_weighting_runs():
    scenes = _tiny_scenes(2)
    model = build_model(ModelConfig(**TINY_MODEL))
    cfg = TrainConfig(steps=1, batch_size=1, weighting="manual",
                      manual_weights=(5.0, 1.0, 1.0, 1.0))
    hist = train(model, scenes, cfg)
    assert len(hist) == 1
    # manual mode keeps the uncertainty parameters frozen at zero
    assert hist[0]["s1"] == 0.0 and hist[0]["s4"] == 0.0


def test_train_aborts_on_nonfinite_loss():
    scenes = _tiny_scenes(1)
    model = build_model(ModelConfig(**TINY_MODEL))
    model.seg_head.proj.inner.weight.data[:] = np.inf  # poisons the seg logits
    with np.errstate(invalid="ignore"):
        with pytest.raises(NanLossError, match="l_seg"):
            train(model, scenes, TrainConfig(steps=1, batch_size=1))


def test_train_aborts_on_uncertainty_divergence():
    scenes = _tiny_scenes(1)
    model = build_model(ModelConfig(**TINY_MODEL))
    with pytest.raises(NanLossError, match="diverged"):
        train(model, scenes, TrainConfig(steps=2, batch_size=1, lr=1e6))


def test_uncertainty_params_registered():
    unc = UncertaintyParams()
    names = [n for n, _ in unc.named_parameters()]
    assert names == ["uncertainty.s"]
    assert unc.s.shape == (4,)
