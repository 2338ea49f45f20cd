"""Multi-task training: loss combination, SGD-momentum, the step loop.

The four task losses are either combined through learned log-variances
(each task weighted by exp(-s_k), plus a 0.5*sum(s_k) regularizer) or through
fixed manual weights. One metrics line is appended per step so runs can be
diffed byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heads import LossBundle, compute_losses
from .model import ModelConfig, PerceptionModel
from .radar import build_revp
from .rng import Rng
from .synth import Scene
from .tensor import Tensor, add, backward, div, exp, mul, neg, reduce_sum

LOSS_ORDER = ("l_cls", "l_conf", "l_seg", "l_box")  # s_1..s_4 follow this order
MANUAL_ORDER = ("l_box", "l_conf", "l_cls", "l_seg")  # w_1..w_4 follow this order


class NanLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 4
    lr: float = 1e-2
    momentum: float = 0.937
    weight_decay: float = 5e-4
    seed: int = 0
    weighting: str = "uncertainty"  # or "manual"
    manual_weights: tuple = (1.0, 1.0, 1.0, 1.0)  # box, conf, cls, seg

    def __post_init__(self):
        if self.weighting not in ("uncertainty", "manual"):
            raise ValueError(f"weighting must be uncertainty or manual, got {self.weighting!r}")
        if len(self.manual_weights) != 4 or any(w < 0 for w in self.manual_weights):
            raise ValueError("manual_weights needs 4 non-negative values")


class UncertaintyParams:
    """Four learnable log-variances, one per task, ordered cls, conf, seg, box."""

    def __init__(self):
        self.s = Tensor(np.zeros(4), requires_grad=True)

    def named_parameters(self):
        yield "uncertainty.s", self.s


def uncertainty_combine(bundle: LossBundle, s: Tensor) -> Tensor:
    losses = [getattr(bundle, k) for k in LOSS_ORDER]
    inv_var = exp(neg(s))  # (4,)
    total = reduce_sum(mul(s, 0.5))
    for k, loss in enumerate(losses):
        total = add(total, mul(gather_scalar(inv_var, k), loss))
    return total


def gather_scalar(vec: Tensor, idx: int) -> Tensor:
    from .tensor import gather, reshape

    return reshape(gather(vec, [idx]), ())


def manual_combine(bundle: LossBundle, weights) -> Tensor:
    total = None
    for w, k in zip(weights, MANUAL_ORDER):
        term = mul(getattr(bundle, k), float(w))
        total = term if total is None else add(total, term)
    return total


def cosine_lr(lr0: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


class Sgd:
    """Momentum SGD; weight decay touches only rank >= 2 parameters."""

    def __init__(self, named_params: list, momentum: float, weight_decay: float):
        self.named_params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(t.data) for _, t in self.named_params]

    def step(self, lr: float) -> float:
        sq_sum = 0.0
        for (name, t), v in zip(self.named_params, self.velocity):
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if self.weight_decay and t.data.ndim >= 2:
                g = g + self.weight_decay * t.data
            v *= self.momentum
            v += g
            t.data -= lr * v
            sq_sum += float((g * g).sum())
        return float(np.sqrt(sq_sum))

    def zero_grad(self) -> None:
        for _, t in self.named_params:
            t.zero_grad()


@dataclass
class Sample:
    image: Tensor
    revp: Tensor
    gt_boxes: np.ndarray  # (G, 4) pixel xyxy
    gt_classes: np.ndarray  # (G,) 0-based detector ids
    sem_mask: np.ndarray  # (H, W) int labels


def prepare_sample(scene: Scene, cfg: ModelConfig) -> Sample:
    revp = build_revp(scene.radar_frames, cfg.revp_frames, scene.extrinsic, scene.camera)
    size = cfg.image_size
    if scene.image.shape != (3, size, size):
        raise ValueError(f"scene image {scene.image.shape} vs configured size {size}")
    boxes = np.array([b.to_xyxy(size, size) for b in scene.boxes]).reshape(-1, 4)
    classes = np.array([b.class_id - 1 for b in scene.boxes], dtype=np.int64)
    return Sample(Tensor(scene.image), Tensor(revp.channels),
                  boxes, classes, scene.sem_mask.astype(np.int64))


def _mean_bundle(bundles: list) -> LossBundle:
    n = float(len(bundles))
    out = {}
    for k in LOSS_ORDER:
        total = getattr(bundles[0], k)
        for b in bundles[1:]:
            total = add(total, getattr(b, k))
        out[k] = div(total, n)
    return LossBundle(out["l_cls"], out["l_conf"], out["l_seg"], out["l_box"])


def _check_finite(bundle: LossBundle, total: Tensor, step: int) -> None:
    for k in LOSS_ORDER:
        if not np.isfinite(getattr(bundle, k).data).all():
            raise NanLossError(f"step {step}: {k} is not finite")
    if not np.isfinite(total.data).all():
        raise NanLossError(f"step {step}: combined total is not finite")


def train_step(model: PerceptionModel, batch: list, opt: Sgd, combine, lr: float,
               step: int) -> dict:
    opt.zero_grad()
    bundles = []
    for sample in batch:
        out = model(sample.image, sample.revp)
        bundles.append(compute_losses(out.det_levels, out.seg_logits,
                                      sample.gt_boxes, sample.gt_classes,
                                      sample.sem_mask))
    mean = _mean_bundle(bundles)
    total = combine(mean)
    _check_finite(mean, total, step)
    backward(total)
    grad_norm = opt.step(lr)
    return {"step": step, **{k: getattr(mean, k).item() for k in LOSS_ORDER},
            "total": total.item(), "grad_norm": grad_norm, "lr": lr}


def metrics_line(m: dict, s_values: np.ndarray) -> str:
    fields = [str(m["step"])]
    fields += [f"{m[k]:.10g}" for k in LOSS_ORDER]
    fields.append(f"{m['total']:.10g}")
    fields += [f"{v:.10g}" for v in s_values]
    fields.append(f"{m['lr']:.10g}")
    return "\t".join(fields)


def train(model: PerceptionModel, scenes: list, cfg: TrainConfig,
          metrics_path: str | None = None, log=None, callback=None,
          callback_every: int = 0) -> list:
    """Run the loop over prepared scenes; returns the per-step metrics list.

    callback(step, model, history), invoked every callback_every steps, may
    return True to stop the run early; the cosine schedule still spans
    cfg.steps.
    """
    samples = [prepare_sample(s, model.cfg) for s in scenes]
    unc = UncertaintyParams()
    named = list(model.named_parameters())
    if cfg.weighting == "uncertainty":
        named += list(unc.named_parameters())
        combine = lambda bundle: uncertainty_combine(bundle, unc.s)
    else:
        combine = lambda bundle: manual_combine(bundle, cfg.manual_weights)
    opt = Sgd(named, cfg.momentum, cfg.weight_decay)

    order_rng = Rng(cfg.seed, stream=11)
    queue: list = []
    history = []
    lines = []
    for step in range(cfg.steps):
        while len(queue) < cfg.batch_size:
            queue.extend(order_rng.permutation(len(samples)))
        batch = [samples[queue.pop(0)] for _ in range(cfg.batch_size)]
        lr = cosine_lr(cfg.lr, step, cfg.steps)
        metrics = train_step(model, batch, opt, combine, lr, step)
        if cfg.weighting == "uncertainty" and np.abs(unc.s.data).max() > 10:
            raise NanLossError(f"step {step}: uncertainty log-variance diverged, "
                               f"s = {unc.s.data.tolist()}")
        for i in range(4):
            metrics[f"s{i + 1}"] = float(unc.s.data[i])
        history.append(metrics)
        lines.append(metrics_line(metrics, unc.s.data))
        if log is not None and (step % 25 == 0 or step == cfg.steps - 1):
            log(f"step {step} total {metrics['total']:.4f} "
                f"(cls {metrics['l_cls']:.3f} conf {metrics['l_conf']:.3f} "
                f"seg {metrics['l_seg']:.3f} box {metrics['l_box']:.3f}) lr {lr:.5f}")
        if (callback is not None and callback_every
                and (step + 1) % callback_every == 0
                and callback(step, model, history)):
            break
    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))
    return history
