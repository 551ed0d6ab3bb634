"""Backward matrix Riccati equations on the shared time grid.

Solves

    -dPi/dt = Pi A + A' Pi - (B' Pi + N')' R^-1 (B' Pi + N') + Q,   Pi(T) = G

with classical fixed-step RK4.  ``A`` may be constant or a trajectory sampled on
the grid; RK4 midpoint stages then use the average of the two neighbouring
samples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import BlowUp, DimensionMismatch
from .model import TimeGrid

Array = NDArray[np.float64]

BLOWUP_LIMIT = 1e12


@dataclass(frozen=True)
class RiccatiSolution:
    grid: TimeGrid
    Pi: Array        # (steps+1, D, D)
    terminal: Array

    def __len__(self) -> int:
        return self.Pi.shape[0]

    def at(self, j: int) -> Array:
        return self.Pi[j]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.Pi).min())

    def asymmetry(self) -> float:
        return float(np.abs(self.Pi - np.swapaxes(self.Pi, 1, 2)).max())

    def to_csv(self, path: str | Path) -> None:
        """Write ``t, Pi[0,0], Pi[0,1], ...`` rows (row-major entries)."""
        D = self.Pi.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"Pi_{i}_{j}" for i in range(D) for j in range(D)])
            for t, P in zip(self.grid.t, self.Pi):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in P.ravel()])

    @classmethod
    def from_csv(cls, path: str | Path) -> "RiccatiSolution":
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t = raw[:, 0]
        D = int(round(np.sqrt(raw.shape[1] - 1)))
        Pi = raw[:, 1:].reshape(-1, D, D)
        grid = TimeGrid(float(t[-1]), len(t) - 1)
        return cls(grid, Pi, Pi[-1].copy())


def riccati_rhs(P: Array, A: Array, B: Array, Q: Array, N: Array, Rinv: Array) -> Array:
    """Time derivative ``dPi/dt`` (note the sign: the equation runs backward)."""
    K = B.T @ P + N.T
    return -(P @ A + A.T @ P - K.T @ Rinv @ K + Q)


def _as_trajectory(A: Array, steps: int) -> Array:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 2:
        return np.broadcast_to(A, (steps + 1,) + A.shape)
    if A.shape[0] != steps + 1:
        raise DimensionMismatch(f"A trajectory has {A.shape[0]} samples, grid {steps + 1}")
    return A


def solve_backward(A: Array, B: Array, Q: Array, Ncross: Array | None, R: Array, G: Array,
                   grid: TimeGrid) -> RiccatiSolution:
    """Integrate the Riccati ODE from ``Pi(T) = G`` back to ``t = 0``.

    Raises :class:`BlowUp` if any entry exceeds ``1e12`` (finite escape), with the
    grid time at which it happened.
    """
    A = _as_trajectory(A, grid.steps)
    D = A.shape[1]
    B = np.asarray(B, dtype=np.float64).reshape(D, -1)
    Q = np.asarray(Q, dtype=np.float64)
    Ncross = np.zeros_like(B) if Ncross is None else np.asarray(Ncross, dtype=np.float64)
    Rinv = np.linalg.inv(np.atleast_2d(np.asarray(R, dtype=np.float64)))
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (D, D) or Q.shape != (D, D) or Ncross.shape != B.shape:
        raise DimensionMismatch("inconsistent Riccati coefficient shapes")

    h = -grid.dt
    Pi = np.empty((grid.steps + 1, D, D))
    P = 0.5 * (G + G.T)
    Pi[-1] = P
    t = grid.t
    for j in range(grid.steps - 1, -1, -1):
        A1, A0 = A[j + 1], A[j]
        Am = 0.5 * (A0 + A1)
        k1 = riccati_rhs(P, A1, B, Q, Ncross, Rinv)
        k2 = riccati_rhs(P + 0.5 * h * k1, Am, B, Q, Ncross, Rinv)
        k3 = riccati_rhs(P + 0.5 * h * k2, Am, B, Q, Ncross, Rinv)
        k4 = riccati_rhs(P + h * k3, A0, B, Q, Ncross, Rinv)
        P = P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)) or np.abs(P).max() > BLOWUP_LIMIT:
            raise BlowUp(f"Riccati solution escaped at t={t[j]:.6g}", float(t[j]))
        Pi[j] = P
    return RiccatiSolution(grid, Pi, G.copy())


def midpoint_residual(sol: RiccatiSolution, A: Array, B: Array, Q: Array,
                      Ncross: Array | None, R: Array) -> Array:
    """Per-interval ODE residual at grid midpoints (``O(dt^2)`` for a good solve)."""
    A = _as_trajectory(A, sol.grid.steps)
    B = np.asarray(B, dtype=np.float64).reshape(A.shape[1], -1)
    Ncross = np.zeros_like(B) if Ncross is None else np.asarray(Ncross)
    Rinv = np.linalg.inv(np.atleast_2d(R))
    dt = sol.grid.dt
    out = np.empty(sol.grid.steps)
    for j in range(sol.grid.steps):
        Pm = 0.5 * (sol.Pi[j] + sol.Pi[j + 1])
        Am = 0.5 * (A[j] + A[j + 1])
        fd = (sol.Pi[j + 1] - sol.Pi[j]) / dt
        out[j] = np.abs(fd - riccati_rhs(Pm, Am, B, Q, Ncross, Rinv)).max()
    return out
