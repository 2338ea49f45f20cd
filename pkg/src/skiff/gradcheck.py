"""Finite-difference verification for every differentiable block.

Each check builds one block at desk scale, perturbs any zero-initialized
parameters so gates sit off their plateaus, and compares analytic
gradients of a scalar probe loss against central differences. Discrete
steps (cluster assignment, positive-sample matching) are frozen to the
first evaluation so the probe stays piecewise smooth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbone import (Backbone, BackboneConfig, CocBlock, PointReducer,
                       PointSet, RadarPriorAttention, grid_positions,
                       with_positions)
from .fusion import IrcUnit, RimUnit
from .heads import DetHead, SegHead, compute_losses
from .neck import Aspp, CocUnit, FpnNeck
from .nn import Module
from .rng import Rng
from .tensor import Tensor, add, finite_diff_check, mul, reduce_mean, sigmoid
from .train import UncertaintyParams, uncertainty_combine

TOL = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    passed: bool
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return (f"{status} {self.name:<24} rel_err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.0e}, {self.seconds:.2f}s){extra}")


def _noise(rng: Rng, shape, scale: float = 0.3) -> np.ndarray:
    return rng.normals(int(np.prod(shape))).reshape(shape) * scale


def _jitter_params(module: Module, seed: int, scale: float = 0.05) -> None:
    """Kick every parameter off exact zeros/identities so sigmoids, bilinear
    taps, and argmax ties sit at generic positions."""
    rng = Rng(seed, stream=5)
    for _, t in module.named_parameters():
        t.data += rng.normals(t.size).reshape(t.data.shape) * scale


def _probe(out: Tensor, seed: int) -> Tensor:
    """Scalar readout: fixed random weighting through a smooth squashing."""
    w = Rng(seed, stream=6).normals(int(np.prod(out.shape))).reshape(out.shape)
    return reduce_mean(mul(sigmoid(out), Tensor(w)))


def _run(name: str, fn, params: dict, max_coords: int = 30) -> CheckResult:
    t0 = time.time()
    report = finite_diff_check(fn, params, eps=EPS, tol=TOL, max_coords=max_coords)
    detail = ""
    if report.failures:
        f = report.failures[0]
        detail = f"worst at {f.param}[{f.index}]"
    return CheckResult(name, report.max_rel_err, TOL, report.passed,
                       time.time() - t0, detail)


def _named(module: Module) -> dict:
    return dict(module.named_parameters())


def check_prior_attention() -> CheckResult:
    rng = Rng(11)
    att = RadarPriorAttention(rng.child(1), channels=4)
    _jitter_params(att, 12)
    x = Tensor(_noise(rng.child(2), (4, 8, 8)))
    return _run("prior_attention", lambda: _probe(att(x), 13), _named(att))


def check_point_reducer() -> CheckResult:
    rng = Rng(21)
    red = PointReducer(6, 12, 2, rng.child(1))  # 4 feature rows + 2 coord rows
    x = Tensor(_noise(rng.child(2), (4, 64)))
    points = PointSet(x, grid_positions(8, 8), 8, 8)

    def fn():
        return _probe(red(with_positions(points), 8, 8).features, 22)

    return _run("point_reducer", fn, _named(red))


def check_coc_block() -> CheckResult:
    rng = Rng(31)
    block = CocBlock(16, heads=2, grid=2, rng=rng.child(1))
    _jitter_params(block, 32)
    feats = Tensor(_noise(rng.child(2), (16, 36)))
    points = PointSet(feats, grid_positions(6, 6), 6, 6)
    return _run("coc_block", lambda: _probe(block(points).features, 33), _named(block))


def check_irc() -> CheckResult:
    rng = Rng(41)
    irc = IrcUnit(8, rng.child(1), groups=2)
    _jitter_params(irc, 42)
    a = Tensor(_noise(rng.child(2), (8, 6, 6)))
    b = Tensor(_noise(rng.child(3), (8, 6, 6)))
    return _run("irc_fusion", lambda: _probe(irc(a, b), 43), _named(irc))


def check_rim() -> CheckResult:
    rng = Rng(51)
    rim = RimUnit(8)
    _jitter_params(rim, 52)
    a = Tensor(_noise(rng.child(2), (8, 6, 6)))
    b = Tensor(_noise(rng.child(3), (8, 6, 6)))
    return _run("rim_modulation", lambda: _probe(rim(a, b), 53), _named(rim))


def check_aspp() -> CheckResult:
    rng = Rng(61)
    aspp = Aspp(8, rng.child(1))
    _jitter_params(aspp, 62)
    x = Tensor(_noise(rng.child(2), (8, 8, 8)))
    return _run("aspp", lambda: _probe(aspp(x), 63), _named(aspp))


def check_fpn_level() -> CheckResult:
    rng = Rng(71)
    unit = CocUnit(16, rng.child(1), extent=4, heads=2)
    _jitter_params(unit, 72)
    x = Tensor(_noise(rng.child(2), (16, 4, 4)))
    return _run("fpn_coc_unit", lambda: _probe(unit(x), 73), _named(unit))


def check_neck() -> CheckResult:
    rng = Rng(81)
    neck = FpnNeck((8, 12, 16, 24), neck_dim=8, size=32, rng=rng.child(1))
    _jitter_params(neck, 82, scale=0.02)

    class _Pair:
        def __init__(self, v, r):
            self.vision, self.radar = v, r

    class _Map:
        def __init__(self, t):
            self._t = t

        def as_map(self):
            return self._t

    maps = []
    for i, (d, e) in enumerate(zip((8, 12, 16, 24), (8, 4, 2, 1))):
        v = Tensor(_noise(rng.child(10 + i), (d, e, e)))
        r = Tensor(_noise(rng.child(20 + i), (d, e, e)))
        maps.append(_Pair(_Map(v), _Map(r)))

    def fn():
        pyr = neck(maps)
        total = None
        for i, t in enumerate(pyr.vision + pyr.radar):
            term = _probe(t, 83 + i)
            total = term if total is None else add(total, term)
        return total

    return _run("fpn_neck", fn, _named(neck), max_coords=8)


def check_seg_head() -> CheckResult:
    rng = Rng(91)
    head = SegHead(8, 5, rng.child(1))
    _jitter_params(head, 92, scale=0.02)
    x = Tensor(_noise(rng.child(2), (8, 8, 8)))
    return _run("seg_head", lambda: _probe(head(x), 93), _named(head), max_coords=12)


def check_det_head_losses() -> CheckResult:
    """Both heads exercised through the task losses, assignment frozen."""
    rng = Rng(101)
    det = DetHead(8, 3, rng.child(1), strides=(8, 16, 32))
    seg = SegHead(8, 5, rng.child(2))
    _jitter_params(det, 102, scale=0.05)
    _jitter_params(seg, 103, scale=0.02)
    pyramid = [Tensor(_noise(rng.child(10 + i), (8, e, e))) for i, e in enumerate((8, 4, 2))]
    finest = Tensor(_noise(rng.child(20), (8, 8, 8)))
    gt_boxes = np.array([[6.0, 10.0, 30.0, 40.0], [20.0, 24.0, 60.0, 56.0]])
    gt_classes = np.array([0, 2])
    mask = (Rng(104).raw(64 * 64).reshape(64, 64) % np.uint64(5)).astype(np.int64)

    def fn():
        levels = det(pyramid)
        seg_logits = seg(finest)
        bundle = compute_losses(levels, seg_logits, gt_boxes, gt_classes, mask)
        return add(add(bundle.l_cls, bundle.l_conf), add(bundle.l_seg, bundle.l_box))

    params = {**{f"det.{k}": v for k, v in det.named_parameters()},
              **{f"seg.{k}": v for k, v in seg.named_parameters()}}
    return _run("det_seg_losses", fn, params, max_coords=8)


def check_combiner() -> CheckResult:
    rng = Rng(111)
    unc = UncertaintyParams()
    unc.s.data += rng.normals(4) * 0.3
    raw = Tensor(np.abs(rng.normals(4)) + 0.5, requires_grad=True)

    class _Bundle:
        pass

    def fn():
        from .train import LOSS_ORDER, gather_scalar

        bundle = _Bundle()
        for i, k in enumerate(LOSS_ORDER):
            bundle.__dict__[k] = mul(gather_scalar(raw, i), 1.0)
        return uncertainty_combine(bundle, unc.s)

    return _run("uncertainty_combiner", fn, {"s": unc.s, "losses": raw})


def check_full_backbone() -> CheckResult:
    rng = Rng(121)
    cfg = BackboneConfig(dims=(8, 12, 16, 24), strides=(4, 2, 2, 2),
                         blocks=(1, 1, 1, 1), heads=(2, 2, 2, 2),
                         center_grids=(4, 2, 1, 1))
    bb = Backbone(cfg, size=32, rng=rng.child(1))
    _jitter_params(bb, 122, scale=0.02)
    image = Tensor(_noise(rng.child(2), (3, 32, 32)))
    revp = Tensor(_noise(rng.child(3), (4, 32, 32)))

    def fn():
        stages = bb(image, revp)
        total = None
        for i, st in enumerate(stages):
            term = add(_probe(st.vision.features, 123 + i),
                       _probe(st.radar.features, 150 + i))
            total = term if total is None else add(total, term)
        return total

    return _run("backbone_composite", fn, _named(bb), max_coords=6)


ALL_CHECKS = (
    check_prior_attention,
    check_point_reducer,
    check_coc_block,
    check_irc,
    check_rim,
    check_aspp,
    check_fpn_level,
    check_neck,
    check_seg_head,
    check_det_head_losses,
    check_combiner,
    check_full_backbone,
)


def run_suite(log=None) -> list:
    results = []
    for check in ALL_CHECKS:
        res = check()
        results.append(res)
        if log is not None:
            log(res.line())
    return results


def suite_passed(results: list) -> bool:
    return all(r.passed for r in results)
