"""Empirical epsilon-Nash gap of the mean-field laws in finite populations.

A single agent deviates within the linear feedback class,

    u = u* + dL [features] + dm(t),

where the features are ``[x^i; y; x0; x^{(N_1)}..x^{(N_K)}]`` for a minor agent
and ``[x0; y; x^{(N_1)}..x^{(N_K)}]`` for the major agent, and ``dm`` is
piecewise constant on a coarse sub-grid.  Every other agent keeps its
equilibrium law.  The search runs Nelder-Mead on a training batch with common
random numbers; the winning deviation is then re-scored against the baseline
on an independent batch, so the reported gap is an unbiased estimate of a
specific deviation's improvement and hence a lower bound on the true gap.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize

from .errors import BudgetExhausted
from .model import ModelSpec
from .offset import OffsetEstimator
from .sim import draw_noise, simulate_finite

Array = NDArray[np.float64]

log = logging.getLogger(__name__)

# path-index offset of the independent scoring batch
SCORING_OFFSET = 1_000_000


def parse_role(role: str, K: int) -> tuple[int, int | None]:
    """``"major"`` -> ``(0, None)``; ``"minor-k"`` (1-based type) -> ``(1, k - 1)``."""
    if role == "major":
        return 0, None
    if role.startswith("minor-"):
        k = int(role.split("-", 1)[1])
        if not 1 <= k <= K:
            raise ValueError(f"role {role!r}: type must be in 1..{K}")
        return 1, k - 1
    raise ValueError(f"unknown role {role!r}; use 'major' or 'minor-k'")


def feature_dim(spec: ModelSpec, agent: int) -> int:
    n, d, K = spec.dims.n, spec.dims.d, spec.dims.K
    return (n + d + n * K) if agent == 0 else (n + d + n + n * K)


@dataclass
class DeviationPolicy:
    """``dL`` (m x p) on the features plus ``dm`` (pieces x m) on a coarse sub-grid."""

    agent: int
    dL: Array
    dm: Array
    steps: int

    @classmethod
    def zero(cls, spec: ModelSpec, agent: int, pieces: int = 4) -> "DeviationPolicy":
        m = spec.dims.m
        return cls(agent, np.zeros((m, feature_dim(spec, agent))), np.zeros((pieces, m)),
                   spec.grid.steps)

    @property
    def size(self) -> int:
        return self.dL.size + self.dm.size

    @property
    def theta(self) -> Array:
        return np.concatenate([self.dL.ravel(), self.dm.ravel()])

    def with_theta(self, theta: Array) -> "DeviationPolicy":
        theta = np.asarray(theta, dtype=np.float64)
        k = self.dL.size
        return DeviationPolicy(self.agent, theta[:k].reshape(self.dL.shape),
                               theta[k:].reshape(self.dm.shape), self.steps)

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.dL) or np.any(self.dm))

    def piece(self, j: int) -> int:
        return min(j * self.dm.shape[0] // max(self.steps, 1), self.dm.shape[0] - 1)

    def delta(self, j: int, features: Array) -> Array:
        return features @ self.dL.T + self.dm[self.piece(j)]


@dataclass
class GapEstimate:
    N: int
    role: str
    baseline: float
    best: float
    gap: float
    stderr: float
    baseline_se: float
    best_se: float
    evals: int
    exhausted: bool
    train_improvement: float
    policy: DeviationPolicy | None = None
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"N": self.N, "role": self.role, "baseline": self.baseline, "best": self.best,
                "gap": self.gap, "stderr": self.stderr, "evals": self.evals,
                "exhausted": int(self.exhausted)}


def _agent_costs(report, agent: int) -> Array:
    return report.costs[:, agent]


def estimate_gap(spec: ModelSpec, gains, offsets: OffsetEstimator, N: int, role: str = "major",
                 budget: int = 120, seed: int = 0, train_paths: int = 200,
                 score_paths: int = 400, pieces: int = 4, step: float = 0.2) -> GapEstimate:
    """Search for a profitable unilateral deviation and score it out of sample.

    ``budget`` caps the number of training evaluations.  ``gap = max(0, baseline
    - best)`` on the scoring batch, with the paired standard error of the
    path-level cost differences.
    """
    agent, ktype = parse_role(role, spec.dims.K)
    t0 = time.perf_counter()
    train = draw_noise(spec, N, train_paths, seed, forced_type=ktype)
    zero = DeviationPolicy.zero(spec, agent, pieces)

    def cost(theta: Array) -> float:
        pol = zero.with_theta(theta)
        _, rep = simulate_finite(spec, gains, offsets, N, train_paths, seed, noise=train,
                                 deviation=None if pol.is_zero else pol, cost_agent=agent)
        return float(_agent_costs(rep, agent).mean())

    base_train = cost(zero.theta)
    x0 = zero.theta
    simplex = np.vstack([x0] + [x0 + step * e for e in np.eye(x0.size)])
    res = minimize(cost, x0, method="Nelder-Mead",
                   options={"maxfev": max(budget - 1, x0.size + 2), "initial_simplex": simplex,
                            "xatol": 1e-3, "fatol": 1e-6})
    exhausted = not res.success
    best_theta = res.x if res.fun < base_train else x0
    if exhausted:
        warnings.warn(BudgetExhausted(
            f"N={N} {role}: search stopped after {res.nfev} evaluations; returning best so far"),
            stacklevel=2)
    best = zero.with_theta(best_theta)

    score = draw_noise(spec, N, score_paths, seed, forced_type=ktype, path_offset=SCORING_OFFSET)
    _, rep0 = simulate_finite(spec, gains, offsets, N, score_paths, seed, noise=score,
                              cost_agent=agent)
    base = _agent_costs(rep0, agent)
    if best.is_zero:
        dev = base.copy()
    else:
        _, rep1 = simulate_finite(spec, gains, offsets, N, score_paths, seed, noise=score,
                                  deviation=best, cost_agent=agent)
        dev = _agent_costs(rep1, agent)
    diff = base - dev
    se = float(diff.std(ddof=1) / np.sqrt(diff.size))
    out = GapEstimate(
        N=N, role=role, baseline=float(base.mean()), best=float(dev.mean()),
        gap=max(0.0, float(diff.mean())), stderr=se,
        baseline_se=float(base.std(ddof=1) / np.sqrt(base.size)),
        best_se=float(dev.std(ddof=1) / np.sqrt(dev.size)), evals=int(res.nfev) + 1,
        exhausted=exhausted, train_improvement=float(base_train - min(res.fun, base_train)),
        policy=best, meta={"seed": seed, "train_paths": train_paths,
                           "score_paths": score_paths, "pieces": pieces,
                           "seconds": time.perf_counter() - t0})
    log.info("N=%d %s gap=%.3g (se %.2g) after %d evals", N, role, out.gap, se, out.evals)
    return out


def gap_curve(spec: ModelSpec, gains, offsets: OffsetEstimator, N_schedule=None,
              role: str = "major", workers: int = 1, **kwargs) -> list[GapEstimate]:
    """:func:`estimate_gap` for each ``N`` with the shared master seed."""
    schedule = list(N_schedule or spec.population.N_schedule)

    def one(N: int) -> GapEstimate:
        return estimate_gap(spec, gains, offsets, N, role=role, **kwargs)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, schedule))
    return [one(N) for N in schedule]


def write_gap_csv(path: str | Path, estimates: list[GapEstimate]) -> None:
    keys = ["N", "role", "baseline", "best", "gap", "stderr", "evals", "exhausted"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for e in estimates:
            row = e.row()
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])
