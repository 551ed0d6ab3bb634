"""Offset BSDEs solved jointly by regression Monte Carlo.

The major offset ``s0`` and the type-averaged minor offsets ``sbar^k`` satisfy

    dS = -(A(t) S + c(t) + ell(t) fhat_t) dt + dMartingale,   S_T = 0,

where ``S = (s0, sbar^1, ..., sbar^K)``.  The coupling matrix ``A(t)`` collects the
closed-loop offset dynamics plus the self-coupling through ``rbar = -R^-1 B' sbar``
and ``mbar = B rbar + b`` inside the forcing of both agents; ``c`` carries
``b0, b_k`` and ``ell`` the filtered drift ``fhat``.  Since ``fhat`` depends only
on ``(yL_t, pi_t)``, so does ``S_t``, and we fit it by least squares on a
polynomial basis in those variables, stepping backward with the trapezoidal
rule (implicit in ``S_t``).

The martingale integrands are not estimated.  A representative minor's own
offset is taken equal to ``sbar^k``: its driver is the same observation-adapted
process and its idiosyncratic noise integrates out of the conditional
expectation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import OffGrid, PathBudgetTooSmall, RankDeficientRegression
from .model import ModelSpec, TimeGrid, build_extended_major, build_extended_minor
from .paths import latent_paths
from .wonham import filtered_drift, wonham_update

Array = NDArray[np.float64]

OFFSET_FORMAT_VERSION = 1
MIN_PATHS_PER_FEATURE = 10


@dataclass(frozen=True)
class JointOffsetSystem:
    A: Array        # (steps+1, D, D)
    c: Array        # (steps+1, D)
    ell: Array      # (steps+1, D, d)
    D0: int
    Dk: int
    K: int

    @property
    def size(self) -> int:
        return self.D0 + self.K * self.Dk

    def split(self, S: Array) -> tuple[Array, list[Array]]:
        s0 = S[..., : self.D0]
        sbar = [S[..., self.D0 + k * self.Dk: self.D0 + (k + 1) * self.Dk]
                for k in range(self.K)]
        return s0, sbar

    def drift(self, j: int, S: Array, fhat: Array) -> Array:
        return S @ self.A[j].T + self.c[j] + fhat @ self.ell[j].T


def joint_offset_system(spec: ModelSpec, gains) -> JointOffsetSystem:
    """Assemble ``A(t)``, ``c(t)``, ``ell(t)`` from converged gains and Riccati solutions."""
    dims = spec.dims
    n, m, d, K = dims.n, dims.m, dims.d, dims.K
    D0, Dk = dims.major_ext, dims.minor_ext
    D = D0 + K * Dk
    T1 = spec.grid.steps + 1
    major = build_extended_major(spec, gains)
    minors = [build_extended_minor(spec, gains, gains.Pi0, k, major=major) for k in range(K)]
    Pi0 = gains.Pi0.Pi
    R0inv = np.linalg.inv(major.R)

    # M0 = W S + c0 + ell0 fhat
    W = np.zeros((D0, D))
    for k in range(K):
        Rk_op = -np.linalg.solve(spec.minor_costs[k].R, spec.minors[k].Bk.T)   # (m, n)
        cols = slice(D0 + k * Dk, D0 + k * Dk + n)
        W[:d, cols] = major.F_pi[:, k * m:(k + 1) * m] @ Rk_op
        W[d + n + k * n: d + n + (k + 1) * n, cols] = spec.minors[k].Bk @ Rk_op
    c0 = np.zeros((T1, D0))
    c0[:, d:d + n] = major.b0
    for k in range(K):
        c0[:, d + n + k * n: d + n + (k + 1) * n] = minors[k].bk
    ell0 = np.zeros((D0, d))
    ell0[:d] = np.eye(d)
    BRB0 = major.B @ R0inv @ major.B.T

    A = np.zeros((T1, D, D))
    c = np.zeros((T1, D))
    ell = np.zeros((T1, D, d))
    P0 = np.swapaxes(major.A - major.B @ R0inv @ major.N.T, 1, 2) - Pi0 @ BRB0
    s0 = slice(0, D0)
    A[:, s0, :] = Pi0 @ W
    A[:, s0, s0] += P0
    c[:, s0] = np.einsum("tij,tj->ti", Pi0, c0)
    ell[:, s0] = Pi0 @ ell0
    for k, sysk in enumerate(minors):
        Rinv = np.linalg.inv(sysk.R)
        Pik = gains.Pik[k].Pi
        Pk = np.swapaxes(sysk.A - sysk.B @ Rinv @ sysk.N.T, 1, 2) - Pik @ (sysk.B @ Rinv @ sysk.B.T)
        Px, Plow = Pik[:, :, :n], Pik[:, :, n:]
        rows = slice(D0 + k * Dk, D0 + (k + 1) * Dk)
        A[:, rows, :] = Plow @ W
        A[:, rows, s0] -= Plow @ BRB0
        A[:, rows, rows] += Pk
        c[:, rows] = np.einsum("tij,tj->ti", Px, sysk.bk) + np.einsum("tij,tj->ti", Plow, c0)
        ell[:, rows] = Plow @ ell0
    return JointOffsetSystem(A, c, ell, D0, Dk, K)


def mean_field_offsets(spec: ModelSpec, sbar: list[Array], j: int) -> tuple[Array, Array]:
    """``rbar^k = -R_k^-1 B_k' sbar^k`` and ``mbar^k = B_k rbar^k + b_k(t_j)``, stacked."""
    n = spec.dims.n
    r_parts, m_parts = [], []
    for k, sk in enumerate(sbar):
        Bk = spec.minors[k].Bk
        rk = -(sk[..., :n] @ np.linalg.solve(spec.minor_costs[k].R, Bk.T).T)
        bk = spec.minors[k].bk
        bk_j = bk if bk.ndim == 1 else bk[j]
        r_parts.append(rk)
        m_parts.append(rk @ Bk.T + bk_j)
    return np.concatenate(r_parts, axis=-1), np.concatenate(m_parts, axis=-1)


# ----------------------------------------------------------------------------
# polynomial basis
# ----------------------------------------------------------------------------

def basis_exponents(n_vars: int, degree: int) -> list[tuple[int, ...]]:
    """Monomials of total degree ``<= degree``; the constant comes first."""
    out = [()]
    for deg in range(1, degree + 1):
        out.extend(itertools.combinations_with_replacement(range(n_vars), deg))
    return out


def raw_features(yL: Array, pi: Array) -> Array:
    """Regression variables ``(yL, pi^1..pi^{M-1})``; the last weight is implied."""
    return np.concatenate([yL, pi[..., :-1]], axis=-1)


def design(z: Array, monomials: list[tuple[int, ...]]) -> Array:
    cols = [np.ones(z.shape[:-1])]
    for mono in monomials[1:]:
        col = np.ones(z.shape[:-1])
        for v in mono:
            col = col * z[..., v]
        cols.append(col)
    return np.stack(cols, axis=-1)


@dataclass
class OffsetEstimator:
    """Per-slice least-squares fit of ``S_t`` on polynomials in ``(yL_t, pi_t)``.

    Coefficients act on standardised variables ``(z - mean) / scale``; variables
    that do not vary at a slice (e.g. ``t = 0``) are frozen at their mean.
    """

    grid: TimeGrid
    degree: int
    variable_names: list[str]
    mean: Array       # (steps+1, p)
    scale: Array      # (steps+1, p); 0 marks an inactive variable
    coefs: Array      # (steps+1, n_basis, D)
    D0: int
    Dk: int
    K: int
    fit_rms: Array    # (steps,) in-sample RMS regression residual
    paths: int = 0

    @property
    def monomials(self) -> list[tuple[int, ...]]:
        return basis_exponents(len(self.variable_names), self.degree)

    @property
    def basis_description(self) -> str:
        names = self.variable_names
        terms = ["1" if not m else "*".join(names[v] for v in m) for m in self.monomials]
        return " + ".join(terms)

    def _standardise(self, j: int, z: Array) -> Array:
        sc = self.scale[j]
        active = sc > 0
        out = np.zeros_like(z)
        out[..., active] = (z[..., active] - self.mean[j, active]) / sc[active]
        return out

    def evaluate_index(self, j: int, yL: Array, pi: Array) -> Array:
        """Joint offset vector at grid index ``j``; batched over leading axes."""
        yL = np.asarray(yL, dtype=np.float64)
        pi = np.asarray(pi, dtype=np.float64)
        lead = np.broadcast_shapes(yL.shape[:-1], pi.shape[:-1])
        if j == self.grid.steps:
            return np.zeros(lead + (self.coefs.shape[2],))
        z = self._standardise(j, raw_features(np.broadcast_to(yL, lead + yL.shape[-1:]),
                                              np.broadcast_to(pi, lead + pi.shape[-1:])))
        return design(z, self.monomials) @ self.coefs[j]

    def split(self, S: Array) -> tuple[Array, list[Array]]:
        s0 = S[..., : self.D0]
        sbar = [S[..., self.D0 + k * self.Dk: self.D0 + (k + 1) * self.Dk]
                for k in range(self.K)]
        return s0, sbar

    def save(self, path: str | Path) -> None:
        np.savez(path, format_version=OFFSET_FORMAT_VERSION, horizon=self.grid.horizon,
                 steps=self.grid.steps, degree=self.degree,
                 variable_names=np.array(self.variable_names), mean=self.mean,
                 scale=self.scale, coefs=self.coefs, D0=self.D0, Dk=self.Dk, K=self.K,
                 fit_rms=self.fit_rms, paths=self.paths,
                 basis=np.array(self.basis_description))

    @classmethod
    def load(cls, path: str | Path) -> "OffsetEstimator":
        z = np.load(path)
        if int(z["format_version"]) != OFFSET_FORMAT_VERSION:
            raise ValueError(f"unsupported offset file version {int(z['format_version'])}")
        return cls(TimeGrid(float(z["horizon"]), int(z["steps"])), int(z["degree"]),
                   [str(v) for v in z["variable_names"]], z["mean"], z["scale"], z["coefs"],
                   int(z["D0"]), int(z["Dk"]), int(z["K"]), z["fit_rms"], int(z["paths"]))


def evaluate_offset(est: OffsetEstimator, t: float, yL: Array, pi: Array) -> tuple[Array, list[Array]]:
    """``(s0, [sbar^1..sbar^K])`` at grid time ``t``; raises :class:`OffGrid` otherwise."""
    j = est.grid.index_of(t)
    if j is None:
        raise OffGrid(f"t={t} is not a grid point")
    return est.split(est.evaluate_index(j, yL, pi))


def _active_variables(z: Array, mean: Array, sd: Array, tol: float = 1e-9) -> NDArray[np.bool_]:
    """Variables that are neither constant nor an exact affine function of earlier ones.

    Right after ``t = 0`` one Euler filter step makes ``pi`` affine in ``yL``; such
    a variable carries no extra information on the sample and is frozen.
    """
    active = sd > 1e-12 * (1.0 + np.abs(mean))
    kept: list[int] = []
    for v in range(z.shape[1]):
        if not active[v]:
            continue
        if kept:
            X = np.column_stack([np.ones(len(z)), (z[:, kept] - mean[kept]) / sd[kept]])
            target = (z[:, v] - mean[v]) / sd[v]
            beta, *_ = np.linalg.lstsq(X, target, rcond=None)
            if np.sqrt(np.mean((target - X @ beta) ** 2)) < tol:
                active[v] = False
                continue
        kept.append(v)
    return active


def _fit_slice(z: Array, Y: Array, monomials, j: int):
    mean = z.mean(axis=0)
    sd = z.std(axis=0)
    active = _active_variables(z, mean, sd)
    scale = np.where(active, sd, 0.0)
    zs = np.zeros_like(z)
    zs[:, active] = (z[:, active] - mean[active]) / sd[active]
    Phi = design(zs, monomials)
    used = [i for i, mono in enumerate(monomials) if all(active[v] for v in mono)]
    X = Phi[:, used]
    rank = np.linalg.matrix_rank(X)
    if rank < len(used):
        raise RankDeficientRegression(
            f"slice {j}: design rank {rank} < {len(used)} basis functions; lower the degree "
            "or add paths")
    beta, *_ = np.linalg.lstsq(X, Y, rcond=None)
    coefs = np.zeros((len(monomials), Y.shape[1]))
    coefs[used] = beta
    return mean, scale, coefs, Phi @ coefs


def simulate_observations(spec: ModelSpec, paths: int, seed: int, offset: int = 0):
    """Forward paths of ``(yL, pi, fhat)`` under the true chain and the Wonham filter."""
    grid, chain, common = spec.grid, spec.chain, spec.common
    idx, dW = latent_paths(chain, grid, spec.dims.r, paths, seed, offset)
    T1, d, M = grid.steps + 1, spec.dims.d, chain.M
    yL = np.empty((paths, T1, d))
    pi = np.empty((paths, T1, M))
    fhat = np.empty((paths, T1, d))
    yL[:, 0] = common.y0
    pi[:, 0] = chain.initial_dist
    t = grid.t
    for j in range(grid.steps):
        drift = common.drift(t[j], yL[:, j], chain.states[idx[:, j]])
        dy = drift * grid.dt + dW[:, j] @ common.sigma.T
        yL[:, j + 1] = yL[:, j] + dy
        pi[:, j + 1], fhat[:, j], _ = wonham_update(pi[:, j], yL[:, j], dy, grid.dt, t[j],
                                                    chain, common)
    fhat[:, -1] = filtered_drift(pi[:, -1], yL[:, -1], t[-1], chain, common)
    return yL, pi, fhat, idx


def solve_joint_offsets(spec: ModelSpec, gains, paths: int = 2000, seed: int = 0,
                        degree: int = 2, control_variate: bool = True) -> OffsetEstimator:
    """Backward regression Monte Carlo for the joint offset vector.

    Trapezoidal step, implicit in ``S_t``::

        (I - dt/2 A_t) S_t = E_t[(I + dt/2 A_{t+dt}) S_{t+dt} + dt/2 h_{t+dt}] + dt/2 h_t

    with ``h = c + ell fhat``; the conditional expectation is a least-squares
    projection on the basis at ``t``.

    With ``control_variate`` the regressand is first stripped of its
    first-order martingale part.  Over one step the regression variables move
    by ``drift dt + G_t nu`` with innovation ``nu = dyL - fhat dt`` and an
    observation-adapted ``G_t``, so ``grad Y(z_t) G_t nu`` has zero conditional
    mean and removing it leaves the projection unbiased while cutting most of
    its Monte Carlo noise.
    """
    system = joint_offset_system(spec, gains)
    names = [f"yL{i + 1}" for i in range(spec.dims.d)] + \
            [f"pi{j + 1}" for j in range(spec.chain.M - 1)]
    monomials = basis_exponents(len(names), degree)
    if paths < MIN_PATHS_PER_FEATURE * len(monomials):
        raise PathBudgetTooSmall(
            f"{paths} paths for {len(monomials)} basis functions; need at least "
            f"{MIN_PATHS_PER_FEATURE * len(monomials)}")
    yL, pi, fhat, _ = simulate_observations(spec, paths, seed)
    grid = spec.grid
    dt, T1, D = grid.dt, grid.steps + 1, system.size
    I = np.eye(D)
    mean = np.zeros((T1, len(names)))
    scale = np.zeros((T1, len(names)))
    coefs = np.zeros((T1, len(monomials), D))
    fit_rms = np.zeros(grid.steps)
    S = np.zeros((paths, D))
    dfhat = _fhat_jacobian(spec)
    for j in range(grid.steps - 1, -1, -1):
        Y = S @ (I + 0.5 * dt * system.A[j + 1]).T + 0.5 * dt * (
            system.c[j + 1] + fhat[:, j + 1] @ system.ell[j + 1].T)
        z = raw_features(yL[:, j], pi[:, j])
        if control_variate:
            Y = Y - _martingale_part(spec, system, j, z, yL, pi, fhat, coefs[j + 1],
                                     mean[j + 1], scale[j + 1], monomials, dfhat)
        mu, sc, beta, fitted = _fit_slice(z, Y, monomials, j)
        fit_rms[j] = float(np.sqrt(((Y - fitted) ** 2).mean()))
        lhs = I - 0.5 * dt * system.A[j]
        rhs = fitted + 0.5 * dt * (system.c[j] + fhat[:, j] @ system.ell[j].T)
        S = np.linalg.solve(lhs, rhs.T).T
        # re-express S_t on the basis (exact when fhat lies in the span)
        mean[j], scale[j] = mu, sc
        coefs[j] = _refit(z, S, mu, sc, monomials)
    return OffsetEstimator(grid, degree, names, mean, scale, coefs, system.D0, system.Dk,
                           system.K, fit_rms, paths)


def design_gradient(z: Array, monomials: list[tuple[int, ...]]) -> Array:
    """Derivatives of every basis function, shape ``(..., n_basis, p)``."""
    p = z.shape[-1]
    out = np.zeros(z.shape[:-1] + (len(monomials), p))
    for b, mono in enumerate(monomials):
        for pos, v in enumerate(mono):
            col = np.ones(z.shape[:-1])
            for other in mono[:pos] + mono[pos + 1:]:
                col = col * z[..., other]
            out[..., b, v] += col
    return out


def _fhat_jacobian(spec: ModelSpec) -> Array:
    """``d fhat / d (yL, pi^1..pi^{M-1})`` for the affine drift family (constant)."""
    st = spec.chain.states
    return np.hstack([spec.common.kappa, (st[:-1] - st[-1]).T])


def _martingale_part(spec, system, j, z, yL, pi, fhat, coefs_next, mean_next, scale_next,
                     monomials, dfhat) -> Array:
    """``grad Y(z_j) G_j nu_j`` with the gradient of the slice ``j+1`` fit taken at ``z_j``."""
    dt = spec.grid.dt
    nu = yL[:, j + 1] - yL[:, j] - fhat[:, j] * dt                  # (P, d)
    parts = [nu]
    if spec.chain.M > 1:
        from .wonham import ObservationNoise
        prec = ObservationNoise(spec.common.sigma).precision
        fall = spec.common.drift_all(spec.grid.t[j], yL[:, j], spec.chain.states)
        gain = np.einsum("pmd,de,pe->pm", fall - fhat[:, j, None, :], prec, nu)
        parts.append((pi[:, j] * gain)[:, :-1])
    dz = np.concatenate(parts, axis=-1)                               # (P, p)
    active = scale_next > 0
    grad_s = np.zeros((z.shape[0], coefs_next.shape[1], z.shape[1]))
    if active.any() and np.any(coefs_next):
        zs = np.zeros_like(z)
        zs[:, active] = (z[:, active] - mean_next[active]) / scale_next[active]
        dphi = design_gradient(zs, monomials)[:, :, active] / scale_next[active]
        grad_s[:, :, active] = np.einsum("bD,pbq->pDq", coefs_next, dphi)
    lift = np.eye(system.size) + 0.5 * dt * system.A[j + 1]
    grad_y = np.einsum("DE,pEq->pDq", lift, grad_s) + 0.5 * dt * (system.ell[j + 1] @ dfhat)
    return np.einsum("pDq,pq->pD", grad_y, dz)


def _refit(z: Array, S: Array, mean: Array, scale: Array, monomials) -> Array:
    active = scale > 0
    zs = np.zeros_like(z)
    zs[:, active] = (z[:, active] - mean[active]) / scale[active]
    Phi = design(zs, monomials)
    used = [i for i, mono in enumerate(monomials) if all(active[v] for v in mono)]
    beta, *_ = np.linalg.lstsq(Phi[:, used], S, rcond=None)
    out = np.zeros((len(monomials), S.shape[1]))
    out[used] = beta
    return out


@dataclass(frozen=True)
class MartingaleDiagnostics:
    """Per-slice zero-conditional-mean test of the discrete BSDE residual.

    ``max_t[j]`` is the largest ``|mean| / stderr`` over feature bins and
    offset components at slice ``j``; ``threshold`` is the 3-sigma two-sided
    level after a Sidak correction over the number of tests in the slice.
    """

    max_t: Array
    threshold: Array
    terminal_norm: float
    bins: int
    paths: int

    @property
    def passed(self) -> NDArray[np.bool_]:
        return self.max_t <= self.threshold

    @property
    def pass_fraction(self) -> float:
        return float(self.passed.mean())


def _bin_index(z: Array, bins: int) -> NDArray[np.int64]:
    sd = z.std(axis=0)
    active = sd > 1e-12 * (1.0 + np.abs(z.mean(axis=0)))
    if not active.any():
        return np.zeros(len(z), dtype=np.int64)
    zs = (z[:, active] - z[:, active].mean(axis=0)) / sd[active]
    # leading principal direction of the standardised variables
    _, _, vt = np.linalg.svd(zs, full_matrices=False)
    score = zs @ vt[0]
    edges = np.quantile(score, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, score, side="right")


def martingale_diagnostics(spec: ModelSpec, gains, est: OffsetEstimator, paths: int = 4000,
                           seed: int = 1, bins: int = 4, sigmas: float = 3.0) -> MartingaleDiagnostics:
    """Test ``E[S_{t+dt} - S_t + dt/2 (h_t + h_{t+dt}) | bin] = 0`` on fresh paths.

    ``h = A S + c + ell fhat`` is the BSDE driver.  Paths come from a stream
    disjoint from the fitting paths.
    """
    from scipy.stats import norm

    system = joint_offset_system(spec, gains)
    yL, pi, fhat, _ = simulate_observations(spec, paths, seed, offset=2_000_000)
    grid = spec.grid
    dt = grid.dt
    S = np.stack([est.evaluate_index(j, yL[:, j], pi[:, j]) for j in range(grid.steps + 1)],
                 axis=1)
    h = np.stack([system.drift(j, S[:, j], fhat[:, j]) for j in range(grid.steps + 1)], axis=1)
    max_t = np.zeros(grid.steps)
    thresh = np.zeros(grid.steps)
    alpha = 2 * norm.sf(sigmas)
    for j in range(grid.steps):
        R = S[:, j + 1] - S[:, j] + 0.5 * dt * (h[:, j] + h[:, j + 1])
        b = _bin_index(raw_features(yL[:, j], pi[:, j]), bins)
        worst, tests = 0.0, 0
        for g in np.unique(b):
            Rg = R[b == g]
            mu = Rg.mean(axis=0)
            se = Rg.std(axis=0, ddof=1) / np.sqrt(len(Rg))
            live = se > 1e-14 * (1.0 + np.abs(Rg).max(axis=0))
            tests += int(live.sum())
            if live.any():
                worst = max(worst, float(np.max(np.abs(mu[live]) / se[live])))
            dead = ~live
            if dead.any() and np.max(np.abs(mu[dead])) > 1e-10:
                worst = np.inf
        max_t[j] = worst
        thresh[j] = norm.isf(0.5 * (1 - (1 - alpha) ** (1.0 / max(tests, 1))))
    return MartingaleDiagnostics(max_t, thresh, float(np.abs(S[:, -1]).max()), bins, paths)
