"""Wonham filter for the latent chain driving the unimpacted common process.

For observations ``dyL = f(t, yL, Gamma_t) dt + sigma dw`` the posterior
``pi^j_t = P(Gamma_t = gamma_j | yL up to t)`` solves

    dpi^j = (V' pi)_j dt + pi^j (f_j - fhat)' (sigma sigma')^-1 (dyL - fhat dt)

with ``fhat = sum_j pi^j f_j`` and ``V`` the chain generator.  We step it with
explicit Euler-Maruyama and project back onto the simplex (clip at zero,
renormalise).  The innovation ``dw_hat = sigma^+ (dyL - fhat dt)`` is an
observation-adapted Wiener increment.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateFilter, SingularSigma
from .model import CommonProcessSpec, LatentChainSpec, TimeGrid

Array = NDArray[np.float64]

NEGATIVITY_WARNING = -0.01


@dataclass(frozen=True)
class FilterState:
    pi: Array
    t: float
    fhat: Array
    innovation_accum: Array

    @classmethod
    def initial(cls, chain: LatentChainSpec, common: CommonProcessSpec,
                yL0: Array | None = None) -> "FilterState":
        yL0 = common.y0 if yL0 is None else np.asarray(yL0, dtype=np.float64)
        pi = np.array(chain.initial_dist, dtype=np.float64)
        fhat = pi @ common.drift_all(0.0, yL0, chain.states)
        return cls(pi, 0.0, fhat, np.zeros(common.sigma.shape[1]))


class ObservationNoise:
    """Precomputed inverses of the observation diffusion (constant in time)."""

    def __init__(self, sigma: Array):
        sigma = np.asarray(sigma, dtype=np.float64)
        d = sigma.shape[0]
        S = sigma @ sigma.T
        if np.linalg.matrix_rank(S) < d:
            raise SingularSigma("common-process sigma is not full row rank")
        self.sigma = sigma
        self.precision = np.linalg.inv(S)
        self.pinv = np.linalg.pinv(sigma)


_NOISE_CACHE: dict[int, tuple[CommonProcessSpec, ObservationNoise]] = {}


def _noise(common: CommonProcessSpec) -> ObservationNoise:
    hit = _NOISE_CACHE.get(id(common))
    if hit is None or hit[0] is not common:
        hit = (common, ObservationNoise(common.sigma))
        _NOISE_CACHE[id(common)] = hit
    return hit[1]


def wonham_update(pi: Array, yL: Array, dyL: Array, dt: float, t: float,
                  chain: LatentChainSpec, common: CommonProcessSpec,
                  noise: ObservationNoise | None = None) -> tuple[Array, Array, int]:
    """One Euler step of the filter for a batch of paths.

    ``pi`` is ``(P, M)``; ``yL`` and ``dyL`` are ``(P, d)``.  Returns the projected
    posterior, the filtered drift at the *start* of the step and the number of
    paths whose pre-projection posterior dipped below ``-0.01``.
    """
    if chain.M == 1:
        fall = common.drift_all(t, yL, chain.states)
        return np.ones_like(pi), fall[..., 0, :], 0
    noise = noise or _noise(common)
    fall = common.drift_all(t, yL, chain.states)              # (P, M, d)
    fhat = np.einsum("pm,pmd->pd", pi, fall)
    innov = dyL - fhat * dt
    gain = np.einsum("pmd,de,pe->pm", fall - fhat[:, None, :], noise.precision, innov)
    new = pi + (pi @ chain.generator) * dt + pi * gain
    low = int((new.min(axis=1) < NEGATIVITY_WARNING).sum())
    new = np.clip(new, 0.0, None)
    total = new.sum(axis=1, keepdims=True)
    if np.any(total <= 0.0):
        raise DegenerateFilter("every posterior component clipped to zero")
    return new / total, fhat, low


def filter_step(state: FilterState, dyL: Array, dt: float, spec: LatentChainSpec,
                common: CommonProcessSpec, yL: Array) -> FilterState:
    """Advance a single-path filter by one step of size ``dt``.

    ``yL`` is the observation level at the start of the step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    yL = np.asarray(yL, dtype=np.float64)
    dyL = np.asarray(dyL, dtype=np.float64)
    try:
        inc = innovation_increment(state, dyL, dt, common)
    except SingularSigma:
        if spec.M > 1:
            raise
        inc = np.zeros_like(state.innovation_accum)
    pi, _, low = wonham_update(state.pi[None], yL[None], dyL[None], dt, state.t, spec, common)
    if low:
        warnings.warn("Wonham step produced a component below -0.01; reduce dt",
                      RuntimeWarning, stacklevel=2)
    t_new = state.t + dt
    fhat = pi[0] @ common.drift_all(t_new, yL + dyL, spec.states)
    return FilterState(pi[0], t_new, fhat, state.innovation_accum + inc)


def innovation_increment(state: FilterState, dyL: Array, dt: float,
                         common: CommonProcessSpec) -> Array:
    """``sigma^+ (dyL - fhat dt)`` using the filtered drift held in ``state``."""
    noise = _noise(common)
    return noise.pinv @ (np.asarray(dyL) - state.fhat * dt)


@dataclass(frozen=True)
class FilterPath:
    grid: TimeGrid
    pi: Array       # (steps+1, M)
    fhat: Array     # (steps+1, d)
    innovation: Array  # (steps+1, r) accumulated

    def to_csv(self, path: str | Path) -> None:
        M, d = self.pi.shape[1], self.fhat.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"pi_{j + 1}" for j in range(M)]
                       + [f"fhat_{i + 1}" for i in range(d)])
            for row in zip(self.grid.t, self.pi, self.fhat):
                w.writerow([repr(float(row[0]))] + [repr(float(v)) for v in row[1]]
                           + [repr(float(v)) for v in row[2]])


def run_filter(yL_path: Array, grid: TimeGrid, chain: LatentChainSpec,
               common: CommonProcessSpec) -> FilterPath:
    """Filter one observed path ``yL_path`` of shape ``(steps+1, d)``."""
    yL_path = np.asarray(yL_path, dtype=np.float64)
    state = FilterState.initial(chain, common, yL_path[0])
    pis, fhats, innov = [state.pi], [state.fhat], [state.innovation_accum]
    for j in range(grid.steps):
        state = filter_step(state, yL_path[j + 1] - yL_path[j], grid.dt, chain, common,
                            yL_path[j])
        state = replace(state, t=grid.t[j + 1])
        pis.append(state.pi)
        fhats.append(state.fhat)
        innov.append(state.innovation_accum)
    return FilterPath(grid, np.array(pis), np.array(fhats), np.array(innov))


def filtered_drift(pi: Array, yL: Array, t: float, chain: LatentChainSpec,
                   common: CommonProcessSpec) -> Array:
    """``fhat = sum_j pi^j f(t, yL, gamma_j)`` batched over leading axes."""
    return np.einsum("...m,...md->...d", pi, common.drift_all(t, yL, chain.states))
