"""Mean-field consistency fixed point.

The control mean field ``ubar = Cbar xbar + Dbar x0 + Ebar ybar + rbar`` and the
state mean field ``dxbar = (Abar xbar + Gbar x0 + Lbar ybar + mbar) dt`` are
parametrised by gain trajectories that must be reproduced by the minor agents'
own best responses.  We find them by damped Picard iteration:

    gains -> major extended system -> Pi0 -> minor extended systems -> Pik -> gains

Because ``Pik`` is time-varying, every gain is a trajectory on the grid.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import DivergenceDetected, NoConvergence
from .model import (
    ModelSpec,
    TimeGrid,
    build_extended_major,
    build_extended_minor,
    minor_blocks,
    selector,
)
from .riccati import RiccatiSolution, solve_backward

Array = NDArray[np.float64]
log = logging.getLogger(__name__)

GAINS_FORMAT_VERSION = 1


@dataclass
class MeanFieldGains:
    """Gain trajectories, stacked over types along the row axis.

    ``Cbar[j]`` is ``(mK, nK)``, ``Dbar[j]`` is ``(mK, n)``, ``Ebar[j]`` is
    ``(mK, d)``; ``Abar``, ``Gbar``, ``Lbar`` are the matching ``nK``-row state
    blocks.  ``Pi0`` and ``Pik`` are the Riccati solutions the gains were
    generated with (``None`` before the first solve).
    """

    grid: TimeGrid
    Cbar: Array
    Dbar: Array
    Ebar: Array
    Abar: Array
    Gbar: Array
    Lbar: Array
    Pi0: RiccatiSolution | None = None
    Pik: list[RiccatiSolution] = field(default_factory=list)
    iterations: int = 0
    residual: float = float("nan")
    history: list[float] = field(default_factory=list)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "MeanFieldGains":
        n, m, d, K = spec.dims.n, spec.dims.m, spec.dims.d, spec.dims.K
        T1 = spec.grid.steps + 1
        C = np.zeros((T1, m * K, n * K))
        D = np.zeros((T1, m * K, n))
        E = np.zeros((T1, m * K, d))
        g = cls(spec.grid, C, D, E, *_state_blocks(spec, C, D, E))
        return g

    def type_rows(self, k: int, n: int, m: int) -> dict[str, Array]:
        """Slice the type-``k`` rows out of every stacked trajectory."""
        cm, cn = slice(k * m, (k + 1) * m), slice(k * n, (k + 1) * n)
        return {"Cbar": self.Cbar[:, cm], "Dbar": self.Dbar[:, cm], "Ebar": self.Ebar[:, cm],
                "Abar": self.Abar[:, cn], "Gbar": self.Gbar[:, cn], "Lbar": self.Lbar[:, cn]}

    def block_index(self, k: int, spec: ModelSpec, j: int = 0) -> dict[str, Array]:
        """Blocks ``Pi_{k,11..14}`` and ``N_{k,1..4}`` of type ``k`` at grid index ``j``."""
        b = minor_blocks(spec.dims)
        P = self.Pik[k].Pi[j]
        n, d = spec.dims.n, spec.dims.d
        Nk = np.zeros((spec.dims.minor_ext, spec.dims.m))
        Nk[: n + d] = spec.minor_costs[k].N
        return {"Pi11": P[b.x, b.x], "Pi12": P[b.x, b.y], "Pi13": P[b.x, b.x0],
                "Pi14": P[b.x, b.xbar], "N1": Nk[b.x], "N2": Nk[b.y], "N3": Nk[b.x0],
                "N4": Nk[b.xbar]}


def _state_blocks(spec: ModelSpec, C: Array, D: Array, E: Array) -> tuple[Array, Array, Array]:
    """``Abar_k = A_k e_k + B_k Cbar_k``, ``Gbar_k = B_k Dbar_k``, ``Lbar_k = B_k Ebar_k``."""
    n, m, K = spec.dims.n, spec.dims.m, spec.dims.K
    A = np.empty((C.shape[0], n * K, n * K))
    G = np.empty((C.shape[0], n * K, D.shape[2]))
    L = np.empty((C.shape[0], n * K, E.shape[2]))
    for k in range(K):
        Bk = spec.minors[k].Bk
        rows, crows = slice(k * n, (k + 1) * n), slice(k * m, (k + 1) * m)
        A[:, rows] = spec.minors[k].Ak @ selector(k, n, K) + Bk @ C[:, crows]
        G[:, rows] = Bk @ D[:, crows]
        L[:, rows] = Bk @ E[:, crows]
    return A, G, L


def gains_from_riccati(spec: ModelSpec, Pik: list[RiccatiSolution]) -> tuple[Array, Array, Array]:
    """Regenerate ``Cbar, Dbar, Ebar`` from the minor Riccati trajectories."""
    n, m, d, K = spec.dims.n, spec.dims.m, spec.dims.d, spec.dims.K
    b = minor_blocks(spec.dims)
    T1 = spec.grid.steps + 1
    C = np.empty((T1, m * K, n * K))
    D = np.empty((T1, m * K, n))
    E = np.empty((T1, m * K, d))
    for k in range(K):
        Bk = spec.minors[k].Bk
        w = spec.minor_costs[k]
        Rinv = np.linalg.inv(w.R)
        N1, N2 = w.N[:n], w.N[n:n + d]          # N_{k,3} = N_{k,4} = 0 by construction
        P = Pik[k].Pi
        P11, P12, P13, P14 = P[:, b.x, b.x], P[:, b.x, b.y], P[:, b.x, b.x0], P[:, b.x, b.xbar]
        BT = Bk.T
        rows = slice(k * m, (k + 1) * m)
        C[:, rows] = (-Rinv @ (N1.T + BT @ P11)) @ selector(k, n, K) - Rinv @ (BT @ P14)
        D[:, rows] = -Rinv @ (BT @ P13)
        E[:, rows] = -Rinv @ (N2.T + BT @ P12)
    return C, D, E


def _solve_riccatis(spec: ModelSpec, gains: MeanFieldGains, workers: int = 1):
    major = build_extended_major(spec, gains)
    Pi0 = solve_backward(major.A, major.B, major.Q, major.N, major.R, major.G, spec.grid)

    def minor(k):
        sysk = build_extended_minor(spec, gains, Pi0, k, major=major)
        return solve_backward(sysk.A, sysk.B, sysk.Q, sysk.N, sysk.R, sysk.G, spec.grid)

    if workers > 1 and spec.dims.K > 1:
        with ThreadPoolExecutor(workers) as pool:
            Pik = list(pool.map(minor, range(spec.dims.K)))
    else:
        Pik = [minor(k) for k in range(spec.dims.K)]
    return Pi0, Pik


def consistency_map(spec: ModelSpec, gains: MeanFieldGains, workers: int = 1):
    """One application of the fixed-point map; returns ``(Pi0, Pik, C, D, E)``."""
    Pi0, Pik = _solve_riccatis(spec, gains, workers)
    return (Pi0, Pik) + gains_from_riccati(spec, Pik)


def solve_consistency(spec: ModelSpec, tol: float = 1e-10, damping: float = 0.5,
                      max_iter: int = 100, workers: int = 1,
                      initial: MeanFieldGains | None = None) -> MeanFieldGains:
    """Damped Picard iteration for the consistency equations.

    Starts from zero gains, so the first iterate is the no-interaction solution;
    that first update is taken in full and damping applies from the second
    iteration on.  Convergence is declared when the largest Frobenius change of
    ``Cbar, Dbar, Ebar`` over the grid falls below ``tol``.  The returned gains
    are the ones the stored ``Pi0``, ``Pik`` were computed from.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    gains = initial if initial is not None else MeanFieldGains.zeros(spec)
    history: list[float] = []
    growth = 0
    for it in range(1, max_iter + 1):
        Pi0, Pik, C_new, D_new, E_new = consistency_map(spec, gains, workers)
        res = max(
            float(np.sqrt(((C_new - gains.Cbar) ** 2).sum(axis=(1, 2))).max()),
            float(np.sqrt(((D_new - gains.Dbar) ** 2).sum(axis=(1, 2))).max()),
            float(np.sqrt(((E_new - gains.Ebar) ** 2).sum(axis=(1, 2))).max()),
        )
        history.append(res)
        log.debug("consistency iteration %d residual %.3e", it, res)
        if res < tol:
            gains.Pi0, gains.Pik = Pi0, Pik
            gains.iterations, gains.residual, gains.history = it, res, history
            return gains
        if len(history) > 1 and res > history[-2]:
            growth += 1
        else:
            growth = 0
        if growth >= 3:
            raise DivergenceDetected(
                f"consistency residual grew for 3 iterations (now {res:.3e})", res, gains)
        a = 1.0 if (it == 1 and initial is None) else damping
        C = (1 - a) * gains.Cbar + a * C_new
        D = (1 - a) * gains.Dbar + a * D_new
        E = (1 - a) * gains.Ebar + a * E_new
        gains = MeanFieldGains(spec.grid, C, D, E, *_state_blocks(spec, C, D, E),
                               Pi0=Pi0, Pik=Pik, iterations=it, residual=res,
                               history=list(history))
    raise NoConvergence(f"no convergence after {max_iter} iterations (residual "
                        f"{history[-1]:.3e})", history[-1], gains)


def fixed_point_residual(spec: ModelSpec, gains: MeanFieldGains) -> dict[str, float]:
    """Re-run one map application from ``gains`` and report the changes."""
    Pi0, Pik, C, D, E = consistency_map(spec, gains)
    out = {
        "gains": max(float(np.abs(C - gains.Cbar).max()), float(np.abs(D - gains.Dbar).max()),
                     float(np.abs(E - gains.Ebar).max())),
    }
    if gains.Pi0 is not None:
        out["Pi0"] = float(np.abs(Pi0.Pi - gains.Pi0.Pi).max())
        out["Pik"] = max(float(np.abs(a.Pi - b.Pi).max()) for a, b in zip(Pik, gains.Pik))
    return out


@dataclass(frozen=True)
class HurwitzReport:
    M1: Array
    max_real_eig: float
    per_time: Array | None = None

    @property
    def passed(self) -> bool:
        return self.max_real_eig < 0


def hurwitz_matrix(spec: ModelSpec, gains: MeanFieldGains, j: int = 0) -> Array:
    """``M1 = diag_k(A_k - B_k R_k^-1 (N_{k,1}' + B_k' Pi_{k,11}))`` at grid index ``j``."""
    n, K = spec.dims.n, spec.dims.K
    b = minor_blocks(spec.dims)
    M1 = np.zeros((n * K, n * K))
    for k in range(K):
        w = spec.minor_costs[k]
        Bk = spec.minors[k].Bk
        P11 = gains.Pik[k].Pi[j][b.x, b.x]
        blk = spec.minors[k].Ak - Bk @ np.linalg.solve(w.R, w.N[:n].T + Bk.T @ P11)
        M1[k * n:(k + 1) * n, k * n:(k + 1) * n] = blk
    return M1


def check_hurwitz(gains: MeanFieldGains, spec: ModelSpec, all_times: bool = False) -> HurwitzReport:
    M1 = hurwitz_matrix(spec, gains, 0)
    lam = float(np.linalg.eigvals(M1).real.max())
    per_time = None
    if all_times:
        per_time = np.array([np.linalg.eigvals(hurwitz_matrix(spec, gains, j)).real.max()
                             for j in range(spec.grid.steps + 1)])
    return HurwitzReport(M1, lam, per_time)


def save_gains(gains: MeanFieldGains, path: str | Path) -> None:
    np.savez(
        path, format_version=GAINS_FORMAT_VERSION, horizon=gains.grid.horizon,
        steps=gains.grid.steps, Cbar=gains.Cbar, Dbar=gains.Dbar, Ebar=gains.Ebar,
        Abar=gains.Abar, Gbar=gains.Gbar, Lbar=gains.Lbar, Pi0=gains.Pi0.Pi,
        Pik=np.stack([p.Pi for p in gains.Pik]), iterations=gains.iterations,
        residual=gains.residual, history=np.array(gains.history))


def load_gains(path: str | Path) -> MeanFieldGains:
    z = np.load(path)
    if int(z["format_version"]) != GAINS_FORMAT_VERSION:
        raise ValueError(f"unsupported gains file version {int(z['format_version'])}")
    grid = TimeGrid(float(z["horizon"]), int(z["steps"]))
    Pi0 = RiccatiSolution(grid, z["Pi0"], z["Pi0"][-1].copy())
    Pik = [RiccatiSolution(grid, P, P[-1].copy()) for P in z["Pik"]]
    return MeanFieldGains(grid, z["Cbar"], z["Dbar"], z["Ebar"], z["Abar"], z["Gbar"],
                          z["Lbar"], Pi0=Pi0, Pik=Pik, iterations=int(z["iterations"]),
                          residual=float(z["residual"]), history=list(z["history"]))
