#!/usr/bin/env python3
"""Dark-scene fusion comparison: full model vs IRC-disabled twin."""

import argparse
import json

from skiff.experiments import fusion_direction


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenes", type=int, default=12)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--report", default="fusion_report.json")
    args = ap.parse_args()
    out = fusion_direction(n_scenes=args.scenes, steps=args.steps,
                           seed=args.seed, report_path=args.report, log=print)
    print(json.dumps({k: out[k] for k in
                      ("recall_50_full", "recall_50_no_irc", "fusion_helps")},
                     indent=2))
    return 0 if out["fusion_helps"] else 1


if __name__ == "__main__":
    raise SystemExit(main())
