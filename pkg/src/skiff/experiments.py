"""Desk-scale training experiments: the overfit smoke run and the
dark-scene fusion comparison."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from .evals import evaluate_model
from .model import build_model, desk_config
from .synth import SynthConfig, generate_dataset
from .train import TrainConfig, train


@dataclass
class OverfitResult:
    steps_run: int
    seconds: float
    map_50: float
    miou_d: float
    step0_total: float
    final_total: float
    history: list = field(repr=False, default_factory=list)

    @property
    def loss_halved(self) -> bool:
        return self.final_total < 0.5 * self.step0_total

    def meets(self, map_target: float = 0.5, iou_target: float = 0.9) -> bool:
        return (self.map_50 >= map_target and self.miou_d >= iou_target
                and self.loss_halved)


def overfit_smoke(n_scenes: int = 16, max_steps: int = 2000, seed: int = 0,
                  batch_size: int = 4, eval_every: int = 250,
                  map_target: float = 0.5, iou_target: float = 0.9,
                  adversity: str = "none", log=None) -> OverfitResult:
    """Train on a small fixed set until the detection and drivable-area
    targets hold on that same set, or the step budget runs out.

    The run stops early once both eval targets and the loss-halving bar
    are met at a periodic checkpointless evaluation; the lr schedule is
    unaffected because it always spans max_steps.
    """
    scenes = generate_dataset(seed, n_scenes, SynthConfig(adversity=adversity))
    model = build_model(desk_config(seed=seed))
    cfg = TrainConfig(steps=max_steps, batch_size=batch_size, seed=seed)

    def targets_met(step, m, hist) -> bool:
        rep = evaluate_model(m, scenes)
        ok = (rep.map_50 >= map_target and rep.miou_d >= iou_target
              and hist[-1]["total"] < 0.5 * hist[0]["total"])
        if log is not None:
            log(f"  eval@{step}: mAP50 {rep.map_50:.3f} drivable {rep.miou_d:.3f}"
                f"{' (targets met)' if ok else ''}")
        return ok

    t0 = time.time()
    history = train(model, scenes, cfg, log=log,
                    callback=targets_met, callback_every=eval_every)
    seconds = time.time() - t0
    report = evaluate_model(model, scenes)
    result = OverfitResult(
        steps_run=len(history), seconds=seconds,
        map_50=report.map_50, miou_d=report.miou_d,
        step0_total=history[0]["total"], final_total=history[-1]["total"],
        history=history)
    if log is not None:
        log(f"overfit: {result.steps_run} steps in {seconds:.0f}s, "
            f"mAP50 {result.map_50:.3f}, drivable IoU {result.miou_d:.3f}, "
            f"loss {result.step0_total:.2f} -> {result.final_total:.2f}")
    return result


def fusion_direction(n_scenes: int = 12, steps: int = 600, seed: int = 0,
                     batch_size: int = 4, report_path: str | None = None,
                     log=None) -> dict:
    """Train the full model and an IRC-disabled twin on identical dark
    scenes with the same seed, and compare recall@50 side by side."""
    scenes = generate_dataset(seed, n_scenes, SynthConfig(adversity="dark"))
    cfg = TrainConfig(steps=steps, batch_size=batch_size, seed=seed)

    variants = {"full": {}, "no_irc": {"irc": False}}
    entries = {}
    for name, overrides in variants.items():
        model = build_model(desk_config(seed=seed, **overrides))
        t0 = time.time()
        train(model, scenes, cfg, log=None)
        report = evaluate_model(model, scenes)
        entries[name] = {**report.to_dict(), "seconds": round(time.time() - t0, 1)}
        if log is not None:
            log(f"{name}: recall@50 {report.recall_50:.3f}, "
                f"mAP50 {report.map_50:.3f} ({entries[name]['seconds']}s)")
    out = {
        "adversity": "dark",
        "scenes": n_scenes,
        "steps": steps,
        "seed": seed,
        "full": entries["full"],
        "no_irc": entries["no_irc"],
        "recall_50_full": entries["full"]["recall_50"],
        "recall_50_no_irc": entries["no_irc"]["recall_50"],
        "fusion_helps": entries["full"]["recall_50"] >= entries["no_irc"]["recall_50"],
    }
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(out, f, indent=2, sort_keys=True)
            f.write("\n")
    return out
