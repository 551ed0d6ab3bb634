"""Compare finite-population costs with the mean-field limit over a schedule of N.

    python3 scripts/cost_convergence.py reference --paths 400 --seed 11
"""

from __future__ import annotations

import argparse

import numpy as np

from latentmfg.cli import resolve_model
from latentmfg.meanfield import solve_consistency
from latentmfg.model import load_model
from latentmfg.offset import solve_joint_offsets
from latentmfg.sim import simulate_finite, simulate_meanfield


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("model")
    p.add_argument("--paths", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--offset-paths", type=int, default=4000)
    args = p.parse_args()

    spec = load_model(resolve_model(args.model))
    gains = solve_consistency(spec)
    est = solve_joint_offsets(spec, gains, paths=args.offset_paths, seed=args.seed)
    _, mf = simulate_meanfield(spec, gains, est, args.paths, args.seed)
    K = spec.dims.K
    head = f"{'N':>4} {'|J0-J0inf|':>11} {'se':>8}"
    head += "".join(f" {f'|J{k + 1}-J{k + 1}inf|':>11} {'se':>8}" for k in range(K))
    print(head)
    for N in spec.population.N_schedule:
        _, rep = simulate_finite(spec, gains, est, N, args.paths, args.seed)
        # the major agent shares its noise with the mean-field run
        diff = rep.costs[:, 0] - mf.costs[:, 0]
        line = f"{N:>4} {abs(diff.mean()):>11.5f} {diff.std(ddof=1) / np.sqrt(diff.size):>8.5f}"
        for k in range(K):
            (jn, sn), (ji, si) = rep.minor(k), mf.minor(k)
            line += f" {abs(jn - ji):>11.5f} {np.hypot(sn, si):>8.5f}"
        print(line)


if __name__ == "__main__":
    main()
