"""Finite-population and mean-field simulation under the equilibrium feedback laws.

Both simulators share one vectorised Euler-Maruyama engine, batched over paths
and agents.  Every agent observes ``y`` and ``x0`` and carries the mean field
``xbar`` forward from its own ODE ``dxbar = (Abar xbar + Gbar x0 + Lbar y + mbar) dt``;
offsets are read from the regression estimator at the filtered state ``(yL, pi)``.

Costs use the quadratic form

    J = 1/2 z_T' G z_T + int_0^T (1/2 z'Qz + z'N u + 1/2 u'Ru) dt

with ``z0 = [y; x0]`` for the major agent and ``zi = [xi; y]`` for minors,
integrated by the trapezoidal rule from stored trajectories.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.typing import NDArray

from .errors import UnstableTrajectory
from .model import ModelSpec, TimeGrid, impact_by_fraction, sample_forcing
from .offset import OffsetEstimator, mean_field_offsets
from .paths import chain_path, stream
from .wonham import wonham_update

Array = NDArray[np.float64]

BLOWUP_NORM = 1e9
COST_PARTS = ("terminal", "running_state", "cross", "control")


# ----------------------------------------------------------------------------
# feedback laws
# ----------------------------------------------------------------------------

def _major_BN(spec: ModelSpec) -> tuple[Array, Array]:
    d, n, m = spec.dims.d, spec.dims.n, spec.dims.m
    D0 = spec.dims.major_ext
    B = np.zeros((D0, m))
    B[:d] = spec.common.F0
    B[d:d + n] = spec.major.B0
    N = np.zeros((D0, m))
    N[: d + n] = spec.major_cost.N
    return B, N


def _minor_BN(spec: ModelSpec, k: int) -> tuple[Array, Array]:
    n, d, m = spec.dims.n, spec.dims.d, spec.dims.m
    Dk = spec.dims.minor_ext
    B = np.zeros((Dk, m))
    B[:n] = spec.minors[k].Bk
    N = np.zeros((Dk, m))
    N[: n + d] = spec.minor_costs[k].N
    return B, N


def _feedback(X: Array, Pi: Array, s: Array, B: Array, N: Array, R: Array) -> Array:
    rhs = X @ (N.T + B.T @ Pi).T + s @ B
    return -rhs @ np.linalg.inv(R).T


def control_major(t: float, X0_ext: Array, Pi0: Array, s0: Array, spec: ModelSpec) -> Array:
    """``u0 = -R0^-1 [N0' X0 + B0' (Pi0 X0 + s0)]``; batched over leading axes of ``X0_ext``."""
    B, N = _major_BN(spec)
    return _feedback(np.asarray(X0_ext, float), np.asarray(Pi0, float),
                     np.asarray(s0, float), B, N, spec.major_cost.R)


def control_minor(t: float, Xi_ext: Array, Pik: Array, sik: Array, spec: ModelSpec,
                  k: int = 0) -> Array:
    """``ui = -Rk^-1 [Nk' Xi + Bk' (Pik Xi + sik)]`` for a type-``k`` minor agent."""
    B, N = _minor_BN(spec, k)
    return _feedback(np.asarray(Xi_ext, float), np.asarray(Pik, float),
                     np.asarray(sik, float), B, N, spec.minor_costs[k].R)


class Deviation(Protocol):
    """Additive control perturbation for one designated agent."""

    agent: int   # 0 for the major agent, i >= 1 for minor agent i

    def delta(self, j: int, features: Array) -> Array: ...


# ----------------------------------------------------------------------------
# random inputs
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseBank:
    """All random inputs of a batch of paths, drawn from per-(path, agent) streams.

    Reusing a bank across policy evaluations gives common random numbers.
    """

    seed: int
    path_offset: int
    chain_idx: NDArray[np.int64]   # (P, steps+1)
    dWL: Array                     # (P, steps, r) latent Wiener increments
    types: NDArray[np.int64]       # (P, N)
    x0_init: Array                 # (P, n)
    dW0: Array                     # (P, steps, r)
    x_init: Array                  # (P, N, n)
    dW: Array                      # (P, N, steps, r)

    @property
    def paths(self) -> int:
        return self.chain_idx.shape[0]

    @property
    def N(self) -> int:
        return self.types.shape[1]


def draw_noise(spec: ModelSpec, N: int, paths: int, seed: int, *, forced_type: int | None = None,
               representatives: bool = False, path_offset: int = 0) -> NoiseBank:
    """Draw a :class:`NoiseBank`.

    Stream 0 of each path gives the chain, the latent Wiener increments and the
    minor types; stream ``a + 1`` gives agent ``a``'s initial state and noise.
    ``forced_type`` pins minor agent 1 to a type.  With ``representatives`` the
    ``N = K`` minors are one per type, in order.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    grid, dims = spec.grid, spec.dims
    n, r, K = dims.n, dims.r, dims.K
    steps, sq = grid.steps, np.sqrt(grid.dt)
    mean = spec.initial_mean()
    std = spec.population.initial_std
    idx = np.empty((paths, steps + 1), dtype=np.int64)
    dWL = np.empty((paths, steps, r))
    types = np.empty((paths, N), dtype=np.int64)
    x0_init = np.empty((paths, n))
    dW0 = np.empty((paths, steps, r))
    x_init = np.empty((paths, N, n))
    dW = np.empty((paths, N, steps, r))
    fractions = spec.population.type_fractions
    for p in range(paths):
        pid = path_offset + p
        rng = stream(seed, pid, 0)
        idx[p] = chain_path(spec.chain, grid, rng)
        dWL[p] = rng.standard_normal((steps, r)) * sq
        if representatives:
            types[p] = np.arange(N) % K
        else:
            types[p] = rng.choice(K, size=N, p=fractions) if K > 1 else 0
            if forced_type is not None:
                types[p, 0] = forced_type
        for a in range(N + 1):
            ag = stream(seed, pid, a + 1)
            init = mean + std * ag.standard_normal(n)
            noise = ag.standard_normal((steps, r)) * sq
            if a == 0:
                x0_init[p], dW0[p] = init, noise
            else:
                x_init[p, a - 1], dW[p, a - 1] = init, noise
    return NoiseBank(seed, path_offset, idx, dWL, types, x0_init, dW0, x_init, dW)


# ----------------------------------------------------------------------------
# trajectories and costs
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SimPath:
    """One simulated path; arrays are views into the batch."""

    grid: TimeGrid
    chain: NDArray[np.int64]    # (steps+1,)
    dWL: Array                  # (steps, r)
    types: NDArray[np.int64]    # (N,)
    x0: Array                   # (steps+1, n)
    u0: Array                   # (steps+1, m)
    x: Array                    # (steps+1, N, n)
    u: Array                    # (steps+1, N, m)
    y: Array                    # (steps+1, d)
    yL: Array                   # (steps+1, d)
    pi: Array                   # (steps+1, M)
    xbar: Array                 # (steps+1, nK) tracked mean field

    @property
    def x_avg(self) -> Array:
        return self.x.mean(axis=1)

    @property
    def u_avg(self) -> Array:
        return self.u.mean(axis=1)

    def type_average(self, k: int) -> Array:
        """``x^{(N_k)}`` over time; NaN when type ``k`` is absent."""
        sel = self.types == k
        if not sel.any():
            return np.full((self.x.shape[0], self.x.shape[2]), np.nan)
        return self.x[:, sel].mean(axis=1)


@dataclass
class SimBatch:
    grid: TimeGrid
    mode: str                   # "finite" or "meanfield"
    noise: NoiseBank
    x0: Array                   # (P, T1, n)
    u0: Array                   # (P, T1, m)
    x: Array                    # (P, T1, N, n)
    u: Array                    # (P, T1, N, m)
    y: Array                    # (P, T1, d)
    yL: Array
    pi: Array
    xbar: Array

    def path(self, p: int) -> SimPath:
        return SimPath(self.grid, self.noise.chain_idx[p], self.noise.dWL[p],
                       self.noise.types[p], self.x0[p], self.u0[p], self.x[p], self.u[p],
                       self.y[p], self.yL[p], self.pi[p], self.xbar[p])

    def paths(self) -> list[SimPath]:
        return [self.path(p) for p in range(self.x0.shape[0])]


def trapezoid(values: Array, dt: float, axis: int = 1) -> Array:
    """Trapezoidal rule over a uniform grid along ``axis``."""
    v = np.moveaxis(values, axis, 0)
    return dt * (0.5 * v[0] + v[1:-1].sum(axis=0) + 0.5 * v[-1])


def quadratic_cost(z: Array, u: Array, G: Array, Q: Array, Ncross: Array, R: Array,
                   dt: float) -> dict[str, Array]:
    """Cost parts for trajectories ``z (..., T1, p)`` and ``u (..., T1, m)``.

    The time axis is the second-to-last one.
    """
    zq = 0.5 * ((z @ Q) * z).sum(axis=-1)
    zn = ((z @ Ncross) * u).sum(axis=-1)
    ur = 0.5 * ((u @ R) * u).sum(axis=-1)
    zT = z[..., -1, :]
    return {"terminal": 0.5 * ((zT @ G) * zT).sum(axis=-1),
            "running_state": trapezoid(zq, dt, axis=-1),
            "cross": trapezoid(zn, dt, axis=-1),
            "control": trapezoid(ur, dt, axis=-1)}


@dataclass
class CostReport:
    """Realised costs per path and agent (column 0 is the major agent).

    ``parts[name]`` has the shape of ``costs`` and the parts sum to ``costs``.
    """

    mode: str
    costs: Array                       # (P, 1 + N)
    parts: dict[str, Array]
    types: NDArray[np.int64]           # (P, N)
    seed: int = 0
    N: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return self.costs.shape[0]

    @staticmethod
    def _mean_se(v: Array) -> tuple[float, float]:
        v = v[np.isfinite(v)]
        if v.size == 0:
            return float("nan"), float("nan")
        se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
        return float(v.mean()), se

    def major(self) -> tuple[float, float]:
        """Mean and standard error of the major agent's cost."""
        return self._mean_se(self.costs[:, 0])

    def type_path_means(self, k: int) -> Array:
        """Per-path average cost over minors of type ``k`` (NaN if absent)."""
        sel = self.types == k
        tot = np.where(sel, self.costs[:, 1:], 0.0).sum(axis=1)
        cnt = sel.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)

    def minor(self, k: int) -> tuple[float, float]:
        """Mean and standard error of a type-``k`` minor agent's cost."""
        return self._mean_se(self.type_path_means(k))

    def agent(self, a: int) -> tuple[float, float]:
        return self._mean_se(self.costs[:, a])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "agent", "type", "cost", *COST_PARTS])
            for p in range(self.paths):
                for a in range(self.costs.shape[1]):
                    typ = "major" if a == 0 else str(int(self.types[p, a - 1]) + 1)
                    w.writerow([p, a, typ, repr(float(self.costs[p, a]))]
                               + [repr(float(self.parts[name][p, a])) for name in COST_PARTS])


def batch_costs(spec: ModelSpec, batch: SimBatch, agent: int | None = None) -> CostReport:
    """Evaluate costs from the stored trajectories (replayable).

    With ``agent`` set only that column is computed; the others are NaN.
    """
    dt = spec.grid.dt
    wc = spec.major_cost
    z0 = np.concatenate([batch.y, batch.x0], axis=-1)
    major = quadratic_cost(z0, batch.u0, wc.G, wc.Q, wc.N, wc.R, dt)
    if agent not in (None, 0):
        major = {name: np.full_like(v, np.nan) for name, v in major.items()}
    P, T1, N, n = batch.x.shape
    parts = {name: np.full((P, 1 + N), np.nan) for name in COST_PARTS}
    for name in COST_PARTS:
        parts[name][:, 0] = major[name]
    types = batch.noise.types
    if agent == 0:
        total = sum(parts[name] for name in COST_PARTS)
        return CostReport(batch.mode, total, parts, types.copy(), batch.noise.seed, N)
    want = np.ones((P, N), dtype=bool)
    if agent is not None:
        want[:] = False
        want[:, agent - 1] = True
    yb = np.broadcast_to(batch.y[:, :, None, :], (P, T1, N, batch.y.shape[-1]))
    zi = np.moveaxis(np.concatenate([batch.x, yb], axis=-1), 2, 1)   # (P, N, T1, n+d)
    ui = np.moveaxis(batch.u, 2, 1)
    for k in range(spec.dims.K):
        sel = (types == k) & want
        if not sel.any():
            continue
        w = spec.minor_costs[k]
        part_k = quadratic_cost(zi[sel], ui[sel], w.G, w.Q, w.N, w.R, dt)
        for name in COST_PARTS:
            parts[name][:, 1:][sel] = part_k[name]
    total = sum(parts[name] for name in COST_PARTS)
    return CostReport(batch.mode, total, parts, types.copy(), batch.noise.seed, N)


# ----------------------------------------------------------------------------
# engine
# ----------------------------------------------------------------------------

class _Laws:
    """Per-step feedback matrices shared by all paths."""

    def __init__(self, spec: ModelSpec, gains):
        dims = spec.dims
        n, m, d, K = dims.n, dims.m, dims.d, dims.K
        B0, N0 = _major_BN(spec)
        R0inv = np.linalg.inv(spec.major_cost.R)
        Pi0 = gains.Pi0.Pi
        self.K0 = R0inv @ (N0.T + B0.T @ Pi0)                      # (T1, m, D0)
        self.k0 = R0inv @ B0.T                                      # (m, D0)
        Kx, Klow, ks = [], [], []
        for k in range(K):
            Bk, Nk = _minor_BN(spec, k)
            Rinv = np.linalg.inv(spec.minor_costs[k].R)
            Kk = Rinv @ (Nk.T + Bk.T @ gains.Pik[k].Pi)             # (T1, m, Dk)
            Kx.append(Kk[:, :, :n])
            Klow.append(Kk[:, :, n:])
            ks.append(Rinv @ Bk.T)
        self.Kx = np.stack(Kx, axis=1)                              # (T1, K, m, n)
        self.Klow = np.stack(Klow, axis=1)                          # (T1, K, m, D0)
        self.ks = np.stack(ks)                                      # (K, m, Dk)
        self.A = np.stack([mk.Ak for mk in spec.minors])
        self.B = np.stack([mk.Bk for mk in spec.minors])
        self.sig = np.stack([spec.minor_sigma(k) for k in range(K)])
        self.b = np.stack([sample_forcing(mk.bk, spec.grid) for mk in spec.minors], axis=1)
        self.b0 = sample_forcing(spec.major.b0, spec.grid)
        self.F = np.stack([spec.common.F[:, k * m:(k + 1) * m] for k in range(K)])
        self.H = np.stack([spec.common.H[:, k * n:(k + 1) * n] for k in range(K)])
        fr = spec.population.type_fractions
        self.F_pi = impact_by_fraction(spec.common.F, fr, m)
        self.H_pi = impact_by_fraction(spec.common.H, fr, n)
        self.Abar, self.Gbar, self.Lbar = gains.Abar, gains.Gbar, gains.Lbar
        self.Cbar, self.Dbar, self.Ebar = gains.Cbar, gains.Dbar, gains.Ebar


def _mv(mats: Array, v: Array) -> Array:
    """Batched matrix-vector product over matching leading axes."""
    return (mats @ v[..., None])[..., 0]


def _check_stable(arrays: list[Array], offset: int) -> None:
    for a in arrays:
        flat = a.reshape(a.shape[0], -1)
        bad = ~np.isfinite(flat).all(axis=1) | (np.abs(flat).max(axis=1) > BLOWUP_NORM)
        if bad.any():
            p = int(np.argmax(bad))
            raise UnstableTrajectory(f"state norm exceeded {BLOWUP_NORM:g} on path {offset + p}",
                                     offset + p)


def _run(spec: ModelSpec, gains, offsets: OffsetEstimator, noise: NoiseBank, mode: str,
         deviation: Deviation | None = None) -> SimBatch:
    grid, dims = spec.grid, spec.dims
    n, m, d, K = dims.n, dims.m, dims.d, dims.K
    P, N = noise.paths, noise.N
    T1, dt = grid.steps + 1, grid.dt
    chain, common = spec.chain, spec.common
    law = _Laws(spec, gains)
    types = noise.types
    sig0 = spec.major_sigma()

    x0 = np.empty((P, T1, n))
    u0 = np.empty((P, T1, m))
    x = np.empty((P, T1, N, n))
    u = np.empty((P, T1, N, m))
    y = np.empty((P, T1, d))
    yL = np.empty((P, T1, d))
    pi = np.empty((P, T1, chain.M))
    xbar = np.empty((P, T1, n * K))
    x0[:, 0] = noise.x0_init
    x[:, 0] = noise.x_init
    y[:, 0] = common.y0
    yL[:, 0] = common.y0
    pi[:, 0] = chain.initial_dist
    xbar[:, 0] = np.tile(spec.initial_mean(), K)

    onehot = (types[:, :, None] == np.arange(K)).astype(float)      # (P, N, K)
    counts = onehot.sum(axis=1)                                       # (P, K)
    A_i, B_i, sig_i = law.A[types], law.B[types], law.sig[types]
    F_i, H_i = law.F[types], law.H[types]

    for j in range(T1):
        S = offsets.evaluate_index(j, yL[:, j], pi[:, j])
        s0, sbar = offsets.split(S)
        rbar, mbar = mean_field_offsets(spec, sbar, j)
        X0 = np.concatenate([y[:, j], x0[:, j], xbar[:, j]], axis=-1)
        u0[:, j] = -(X0 @ law.K0[j].T + s0 @ law.k0.T)
        sb = np.stack(sbar, axis=1)                                   # (P, K, Dk)
        ff = _mv(law.ks, sb)                                          # (P, K, m)
        Kx_i, Klow_i = law.Kx[j][types], law.Klow[j][types]
        u[:, j] = -(_mv(Kx_i, x[:, j]) + _mv(Klow_i, X0[:, None, :])
                    + np.take_along_axis(ff, types[:, :, None], axis=1))
        if deviation is not None:
            feats = _deviation_features(deviation.agent, x[:, j], y[:, j], x0[:, j],
                                        onehot, counts, n)
            if deviation.agent == 0:
                u0[:, j] += deviation.delta(j, feats)
            else:
                u[:, j, deviation.agent - 1] += deviation.delta(j, feats)
        if j == T1 - 1:
            break
        t = grid.t[j]
        dyL = common.drift(t, yL[:, j], chain.states[noise.chain_idx[:, j]]) * dt \
            + noise.dWL[:, j] @ common.sigma.T
        if mode == "finite":
            impact = (_mv(F_i, u[:, j]) + _mv(H_i, x[:, j])).sum(axis=1) / N
        else:
            ubar = (xbar[:, j] @ law.Cbar[j].T + x0[:, j] @ law.Dbar[j].T
                    + y[:, j] @ law.Ebar[j].T + rbar)
            impact = ubar @ law.F_pi.T + xbar[:, j] @ law.H_pi.T
        impact = impact + u0[:, j] @ common.F0.T + x0[:, j] @ common.H0.T
        y[:, j + 1] = y[:, j] + dyL + impact * dt
        yL[:, j + 1] = yL[:, j] + dyL
        pi[:, j + 1], _, _ = wonham_update(pi[:, j], yL[:, j], dyL, dt, t, chain, common)
        xbar[:, j + 1] = xbar[:, j] + (xbar[:, j] @ law.Abar[j].T + x0[:, j] @ law.Gbar[j].T
                                       + y[:, j] @ law.Lbar[j].T + mbar) * dt
        x0[:, j + 1] = x0[:, j] + (x0[:, j] @ spec.major.A0.T + u0[:, j] @ spec.major.B0.T
                                   + law.b0[j]) * dt + noise.dW0[:, j] @ sig0.T
        x[:, j + 1] = x[:, j] + (_mv(A_i, x[:, j]) + _mv(B_i, u[:, j])
                                 + law.b[j][types]) * dt \
            + _mv(sig_i, noise.dW[:, :, j])
        _check_stable([y[:, j + 1], x0[:, j + 1], x[:, j + 1], xbar[:, j + 1]],
                      noise.path_offset)
    return SimBatch(grid, mode, noise, x0, u0, x, u, y, yL, pi, xbar)


def _deviation_features(agent: int, x: Array, y: Array, x0: Array, onehot: Array,
                        counts: Array, n: int) -> Array:
    """``[x0; y; x^{(N_k)}]`` for the major agent, ``[x^i; y; x0; x^{(N_k)}]`` for minor ``i``."""
    sums = np.swapaxes(onehot, 1, 2) @ x
    avg = (sums / np.maximum(counts, 1)[:, :, None]).reshape(x.shape[0], -1)
    if agent == 0:
        return np.concatenate([x0, y, avg], axis=-1)
    return np.concatenate([x[:, agent - 1], y, x0, avg], axis=-1)


def simulate_finite(spec: ModelSpec, gains, offsets: OffsetEstimator, N: int, paths: int,
                    seed: int, *, noise: NoiseBank | None = None,
                    deviation: Deviation | None = None, forced_type: int | None = None,
                    path_offset: int = 0, cost_agent: int | None = None
                    ) -> tuple[SimBatch, CostReport]:
    """Co-simulate the major agent and ``N`` minor agents over ``paths`` paths.

    Returns the trajectory batch (``batch.paths()`` gives per-path views) and the
    cost report.  Pass ``noise`` to reuse random inputs across calls and
    ``cost_agent`` to cost a single agent.
    """
    if noise is None:
        noise = draw_noise(spec, N, paths, seed, forced_type=forced_type,
                           path_offset=path_offset)
    elif noise.N != N or noise.paths != paths:
        raise ValueError("noise bank does not match N / paths")
    batch = _run(spec, gains, offsets, noise, "finite", deviation)
    report = batch_costs(spec, batch, cost_agent)
    report.N = N
    return batch, report


def simulate_meanfield(spec: ModelSpec, gains, offsets: OffsetEstimator, paths: int, seed: int,
                       *, path_offset: int = 0) -> tuple[SimBatch, CostReport]:
    """Infinite-population system with one representative minor agent per type.

    The common process is driven by ``F^pi ubar + H^pi xbar`` with
    ``ubar = Cbar xbar + Dbar x0 + Ebar y + rbar``; the representatives do not
    feed back into ``y``.
    """
    noise = draw_noise(spec, spec.dims.K, paths, seed, representatives=True,
                       path_offset=path_offset)
    batch = _run(spec, gains, offsets, noise, "meanfield")
    report = batch_costs(spec, batch)
    report.N = 0
    return batch, report


def write_cost_summary(path: str | Path, rows: list[dict]) -> None:
    """Write summary rows (dicts with identical keys) with ``repr`` floats."""
    if not rows:
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in (row[k] for k in keys)])


def second_moments(batch: SimBatch) -> dict[str, tuple[float, float]]:
    """``sup_t`` of the path-average of ``|x|^2``, ``|x^{(N)}|^2``, ``|xbar|^2``, ``|y|^2``.

    Minor-agent moments are averaged over agents within a path.  Each entry
    is ``(value, standard error at the maximising time)``.
    """
    series = {
        "x": (batch.x ** 2).sum(axis=-1).mean(axis=-1),
        "x_avg": (batch.x.mean(axis=2) ** 2).sum(axis=-1),
        "xbar": (batch.xbar ** 2).sum(axis=-1),
        "y": (batch.y ** 2).sum(axis=-1),
    }
    out = {}
    P = batch.x.shape[0]
    for name, v in series.items():
        mean = v.mean(axis=0)
        j = int(np.argmax(mean))
        out[name] = (float(mean[j]), float(v[:, j].std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0)
    return out
