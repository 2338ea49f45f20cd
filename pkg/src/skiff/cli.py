"""Command-line entry point: synth / train / eval / infer / gradcheck."""

from __future__ import annotations

import argparse
import os
import sys

from .synth import ADVERSITY_MODES

USAGE_EXIT = 2
ERROR_EXIT = 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skiff",
        description="Vision-radar panoptic perception: data synthesis, training, "
                    "evaluation, and inference dumps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--scenes", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adversity", choices=ADVERSITY_MODES, default="none")

    p = sub.add_parser("train", help="train a model on a scene dataset")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--steps", type=int, default=None, help="override step count")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--disable", default="",
                   help="comma list of toggles to switch off (e.g. rim,irc)")
    p.add_argument("--weighting", default=None,
                   help="uncertainty or manual:w1,w2,w3,w4")
    p.add_argument("--seed", type=int, default=None, help="override both seeds")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default="report.json", help="metrics JSON path")

    p = sub.add_parser("infer", help="run one scene and dump overlay images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True, help="single scene directory")
    p.add_argument("--out", required=True, help="directory for PNG overlays")

    sub.add_parser("gradcheck", help="run the finite-difference suite")
    return parser


def _require_file(path: str) -> None:
    if not os.path.exists(path):
        raise FileNotFoundError(path)


def _parse_weighting(text: str) -> tuple:
    """Returns (mode, weights-or-None); accepts 'uncertainty' or 'manual:a,b,c,d'."""
    if text == "uncertainty":
        return "uncertainty", None
    if text.startswith("manual:"):
        parts = text[len("manual:"):].split(",")
        if len(parts) != 4:
            raise ValueError(f"manual weighting needs 4 weights, got {len(parts)}")
        return "manual", tuple(float(p) for p in parts)
    raise ValueError(f"weighting must be 'uncertainty' or 'manual:w1,w2,w3,w4', got {text!r}")


def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate_dataset, write_dataset

    cfg = SynthConfig(adversity=args.adversity)
    scenes = generate_dataset(args.seed, args.scenes, cfg)
    write_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import save_model
    from .config import load_config_file, serialize_configs
    from .model import TOGGLE_NAMES, build_model, desk_config, paper_config
    from .synth import read_dataset
    from .train import TrainConfig, train

    model_kw: dict = {}
    train_kw: dict = {}
    if args.config is not None:
        _require_file(args.config)
        parsed = load_config_file(args.config)
        model_kw.update(parsed["model"])
        train_kw.update(parsed["train"])
    if args.disable:
        for name in args.disable.split(","):
            name = name.strip()
            if name not in TOGGLE_NAMES:
                raise ValueError(f"unknown toggle {name!r}; choices: "
                                 + ",".join(TOGGLE_NAMES))
            model_kw[name] = False
    if args.seed is not None:
        model_kw["seed"] = args.seed
        train_kw["seed"] = args.seed
    if args.steps is not None:
        train_kw["steps"] = args.steps
    if args.weighting is not None:
        mode, weights = _parse_weighting(args.weighting)
        train_kw["weighting"] = mode
        if weights is not None:
            train_kw["manual_weights"] = weights

    base = desk_config if args.preset == "desk" else paper_config
    mcfg = base(**model_kw)
    tcfg = TrainConfig(**train_kw)

    _require_file(args.data)
    scenes = read_dataset(args.data)
    model = build_model(mcfg)
    metrics_path = args.out + ".metrics.tsv"
    train(model, scenes, tcfg, metrics_path=metrics_path, log=print)
    save_model(args.out, model, serialize_configs(model=mcfg, train=tcfg))
    print(f"checkpoint: {args.out}\nmetrics: {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import model_from_checkpoint
    from .evals import evaluate_model, format_report, write_report
    from .synth import read_dataset

    _require_file(args.ckpt)
    _require_file(args.data)
    model = model_from_checkpoint(args.ckpt)
    scenes = read_dataset(args.data)
    report = evaluate_model(model, scenes)
    print(format_report(report))
    write_report(report, args.report)
    print(f"report: {args.report}")
    return 0


def cmd_infer(args) -> int:
    from .checkpoint import model_from_checkpoint
    from .evals import predict_sample
    from .synth import read_scene
    from .train import prepare_sample
    from .viz import write_overlays

    _require_file(args.ckpt)
    _require_file(args.scene)
    model = model_from_checkpoint(args.ckpt)
    scene = read_scene(args.scene)
    sample = prepare_sample(scene, model.cfg)
    pred, pred_mask = predict_sample(model, sample)
    paths = write_overlays(args.out, scene.image, pred_mask,
                           pred["boxes"], pred["classes"])
    print(f"detections: {len(pred['scores'])}")
    for kind, path in sorted(paths.items()):
        print(f"{kind}: {path}")
    return 0


def cmd_gradcheck(_args) -> int:
    from .gradcheck import run_suite, suite_passed

    results = run_suite(log=print)
    if not suite_passed(results):
        print("gradient check FAILED", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
             "infer": cmd_infer, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        path = exc.filename if exc.filename else exc.args[0]
        print(f"error: missing file: {path}", file=sys.stderr)
        return ERROR_EXIT
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR_EXIT


if __name__ == "__main__":
    sys.exit(main())
