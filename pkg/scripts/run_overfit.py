#!/usr/bin/env python3
"""Overfit smoke run: 16 scenes, uncertainty weighting, desk preset."""

import argparse

from skiff.experiments import overfit_smoke


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenes", type=int, default=16)
    ap.add_argument("--max-steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=250)
    args = ap.parse_args()
    res = overfit_smoke(n_scenes=args.scenes, max_steps=args.max_steps,
                        seed=args.seed, eval_every=args.eval_every, log=print)
    ok = res.meets()
    print(f"targets {'met' if ok else 'NOT met'}")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
