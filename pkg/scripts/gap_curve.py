"""Estimate the epsilon-Nash gap over a population schedule and print the curve.

    python3 scripts/gap_curve.py reference --role minor-1 --seed 3 --out gap.csv
"""

from __future__ import annotations

import argparse
import warnings

from latentmfg.cli import resolve_model
from latentmfg.errors import BudgetExhausted
from latentmfg.meanfield import solve_consistency
from latentmfg.model import load_model
from latentmfg.nash import gap_curve, write_gap_csv
from latentmfg.offset import solve_joint_offsets


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("model")
    p.add_argument("--role", default="minor-1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schedule", default=None, help="comma-separated N values")
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--offset-paths", type=int, default=4000)
    p.add_argument("--out", default=None, help="optional CSV path")
    args = p.parse_args()

    spec = load_model(resolve_model(args.model))
    gains = solve_consistency(spec)
    est = solve_joint_offsets(spec, gains, paths=args.offset_paths, seed=args.seed)
    schedule = [int(v) for v in args.schedule.split(",")] if args.schedule else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BudgetExhausted)
        curve = gap_curve(spec, gains, est, schedule, role=args.role, budget=args.budget,
                          seed=args.seed)
    print(f"{'N':>4} {'baseline':>10} {'best':>10} {'gap':>9} {'stderr':>9} {'evals':>6}")
    for e in curve:
        print(f"{e.N:>4} {e.baseline:>10.5f} {e.best:>10.5f} {e.gap:>9.5f} {e.stderr:>9.5f} "
              f"{e.evals:>6}")
    if args.out:
        write_gap_csv(args.out, curve)


if __name__ == "__main__":
    main()
