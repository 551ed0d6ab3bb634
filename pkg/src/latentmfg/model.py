"""Problem definition for the major-minor LQG game with a latent-chain common process.

A :class:`ModelSpec` bundles the major agent, the K minor types, the latent
Markov chain, the observed common process and all quadratic weights.  It is
immutable after construction (arrays are flagged read-only) so one instance can
be shared by every stage.

State orderings used everywhere in the package

* major cost vector ``z0 = [y; x0]``, minor cost vector ``zi = [xi; y]``
* major extended state ``X0 = [ybar; x0; xbar]``            (size d + n + nK)
* minor extended state ``Xi = [xi; ybar; x0; xbar]``        (size n + d + n + nK)

``xbar`` stacks the per-type mean fields ``[xbar^1; ...; xbar^K]``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml
from numpy.typing import NDArray

from .errors import ConfigError, ConvexityViolation, DimensionMismatch

Array = NDArray[np.float64]

PSD_RTOL = 1e-9
SIMPLEX_TOL = 1e-12


def _frozen(a, ndim: int | None = None) -> Array:
    out = np.array(a, dtype=np.float64)
    if ndim is not None and out.ndim != ndim:
        raise DimensionMismatch(f"expected {ndim}-d array, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_j = j * T / steps`` shared by every module."""

    horizon: float
    steps: int

    def __post_init__(self):
        if self.horizon <= 0 or self.steps < 1:
            raise ConfigError("grid needs horizon > 0 and steps >= 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def t(self) -> Array:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def index_of(self, t: float, atol: float = 1e-9) -> int | None:
        j = int(round(t / self.dt))
        if 0 <= j <= self.steps and abs(j * self.dt - t) <= atol * max(1.0, self.horizon):
            return j
        return None


def sample_forcing(b: Array, grid: TimeGrid) -> Array:
    """Expand a constant ``(n,)`` vector or a sampled ``(steps+1, n)`` trajectory."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        return np.broadcast_to(b, (grid.steps + 1, b.size)).copy()
    if b.shape[0] != grid.steps + 1:
        raise DimensionMismatch(
            f"sampled forcing has {b.shape[0]} rows, grid needs {grid.steps + 1}"
        )
    return b.copy()


@dataclass(frozen=True)
class MajorDynamics:
    A0: Array
    B0: Array
    b0: Array  # (n,) constant or (steps+1, n) sampled
    sigma0: Array

    def __post_init__(self):
        for name in ("A0", "B0", "sigma0"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2))
        object.__setattr__(self, "b0", _frozen(self.b0))


@dataclass(frozen=True)
class MinorTypeDynamics:
    Ak: Array
    Bk: Array
    bk: Array
    sigmak: Array

    def __post_init__(self):
        for name in ("Ak", "Bk", "sigmak"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2))
        object.__setattr__(self, "bk", _frozen(self.bk))


@dataclass(frozen=True)
class LatentChainSpec:
    """Finite-state chain with off-diagonal rates ``v_ij``.

    ``states[j]`` is the drift value ``gamma_j`` (a d-vector).  The exit rate is
    ``v_i = sum_{j != i} v_ij`` and the generator is ``rates - diag(v)``.
    """

    states: Array
    rates: Array
    initial_dist: Array

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states, 2))
        object.__setattr__(self, "rates", _frozen(self.rates, 2))
        object.__setattr__(self, "initial_dist", _frozen(self.initial_dist, 1))

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def exit_rates(self) -> Array:
        off = self.rates - np.diag(np.diag(self.rates))
        return off.sum(axis=1)

    @property
    def generator(self) -> Array:
        off = self.rates - np.diag(np.diag(self.rates))
        return off - np.diag(off.sum(axis=1))


@dataclass(frozen=True)
class CommonProcessSpec:
    """Observed common process ``dy = dyL + (F u + F0 u0 + H x + H0 x0) dt``.

    The unimpacted part uses the affine drift family
    ``f(t, yL, gamma_j) = gamma_j + kappa @ yL`` (``kappa = 0`` gives the
    constant family).  ``F`` and ``H`` are laid out in K column blocks, one per
    minor type.
    """

    sigma: Array
    F: Array
    F0: Array
    H: Array
    H0: Array
    kappa: Array
    y0: Array

    def __post_init__(self):
        for name in ("sigma", "F", "F0", "H", "H0", "kappa"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2))
        object.__setattr__(self, "y0", _frozen(self.y0, 1))

    def drift(self, t: float, yL: Array, gamma: Array) -> Array:
        return gamma + yL @ self.kappa.T

    def drift_all(self, t: float, yL: Array, states: Array) -> Array:
        """Drift under every chain state; ``yL`` is ``(..., d)``, result ``(..., M, d)``."""
        return states + (yL @ self.kappa.T)[..., None, :]


@dataclass(frozen=True)
class CostWeights:
    G: Array
    Q: Array
    N: Array
    R: Array

    def __post_init__(self):
        for name in ("G", "Q", "N", "R"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2))


@dataclass(frozen=True)
class PopulationSpec:
    type_fractions: Array
    N_schedule: tuple[int, ...] = (2, 5, 10, 20, 50)
    wiener_cov: Array | None = None
    initial_mean: Array | None = None
    initial_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "type_fractions", _frozen(self.type_fractions, 1))
        object.__setattr__(self, "N_schedule", tuple(int(v) for v in self.N_schedule))
        if self.wiener_cov is not None:
            object.__setattr__(self, "wiener_cov", _frozen(self.wiener_cov, 2))
        if self.initial_mean is not None:
            object.__setattr__(self, "initial_mean", _frozen(self.initial_mean, 1))

    @property
    def K(self) -> int:
        return self.type_fractions.size


@dataclass(frozen=True)
class Dimensions:
    n: int
    m: int
    r: int
    d: int
    K: int
    M: int

    @property
    def major_ext(self) -> int:
        return self.d + self.n + self.n * self.K

    @property
    def minor_ext(self) -> int:
        return self.n + self.major_ext


@dataclass(frozen=True)
class ModelSpec:
    dims: Dimensions
    grid: TimeGrid
    major: MajorDynamics
    minors: tuple[MinorTypeDynamics, ...]
    chain: LatentChainSpec
    common: CommonProcessSpec
    major_cost: CostWeights
    minor_costs: tuple[CostWeights, ...]
    population: PopulationSpec
    delta: float = 1e-6
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "minors", tuple(self.minors))
        object.__setattr__(self, "minor_costs", tuple(self.minor_costs))
        _check_dimensions(self)

    @property
    def filtering(self) -> bool:
        """Filtering is active whenever the chain has more than one state."""
        return self.chain.M > 1

    def noise_scale(self) -> Array:
        """Cholesky factor of the agent-noise covariance (identity by default)."""
        if self.population.wiener_cov is None:
            return np.eye(self.dims.r)
        return np.linalg.cholesky(self.population.wiener_cov)

    def major_sigma(self) -> Array:
        return self.major.sigma0 @ self.noise_scale()

    def minor_sigma(self, k: int) -> Array:
        return self.minors[k].sigmak @ self.noise_scale()

    def initial_mean(self) -> Array:
        if self.population.initial_mean is None:
            return np.zeros(self.dims.n)
        return np.asarray(self.population.initial_mean)

    def with_grid(self, grid: TimeGrid) -> "ModelSpec":
        return replace(self, grid=grid)


def _expect(shape, want, what):
    if tuple(shape) != tuple(want):
        raise DimensionMismatch(f"{what}: shape {tuple(shape)}, expected {tuple(want)}")


def _check_dimensions(spec: ModelSpec) -> None:
    n, m, r, d, K, M = (spec.dims.n, spec.dims.m, spec.dims.r, spec.dims.d,
                        spec.dims.K, spec.dims.M)
    T1 = spec.grid.steps + 1
    _expect(spec.major.A0.shape, (n, n), "A0")
    _expect(spec.major.B0.shape, (n, m), "B0")
    _expect(spec.major.sigma0.shape, (n, r), "sigma0")
    if spec.major.b0.shape not in ((n,), (T1, n)):
        raise DimensionMismatch(f"b0: shape {spec.major.b0.shape}")
    if len(spec.minors) != K or len(spec.minor_costs) != K:
        raise DimensionMismatch(f"expected {K} minor types")
    if spec.population.K != K:
        raise DimensionMismatch("type_fractions length differs from K")
    for k, mk in enumerate(spec.minors):
        _expect(mk.Ak.shape, (n, n), f"A[{k}]")
        _expect(mk.Bk.shape, (n, m), f"B[{k}]")
        _expect(mk.sigmak.shape, (n, r), f"sigma[{k}]")
        if mk.bk.shape not in ((n,), (T1, n)):
            raise DimensionMismatch(f"b[{k}]: shape {mk.bk.shape}")
    _expect(spec.chain.states.shape, (M, d), "chain states")
    _expect(spec.chain.rates.shape, (M, M), "chain rates")
    _expect(spec.chain.initial_dist.shape, (M,), "chain initial_dist")
    c = spec.common
    _expect(c.sigma.shape, (d, r), "common sigma")
    _expect(c.F.shape, (d, m * K), "F")
    _expect(c.F0.shape, (d, m), "F0")
    _expect(c.H.shape, (d, n * K), "H")
    _expect(c.H0.shape, (d, n), "H0")
    _expect(c.kappa.shape, (d, d), "kappa")
    _expect(c.y0.shape, (d,), "y0")
    for label, w in [("major", spec.major_cost)] + [
        (f"minor[{k}]", w) for k, w in enumerate(spec.minor_costs)
    ]:
        _expect(w.G.shape, (n + d, n + d), f"{label} G")
        _expect(w.Q.shape, (n + d, n + d), f"{label} Q")
        _expect(w.N.shape, (n + d, m), f"{label} N")
        _expect(w.R.shape, (m, m), f"{label} R")
    if spec.population.wiener_cov is not None:
        _expect(spec.population.wiener_cov.shape, (r, r), "wiener_cov")
    if spec.population.initial_mean is not None:
        _expect(spec.population.initial_mean.shape, (n,), "initial_mean")


# ----------------------------------------------------------------------------
# validation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[AssumptionCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[AssumptionCheck]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            flag = "ok  " if c.passed else "FAIL"
            lines.append(f"{flag} {c.name:<40s} margin={c.margin:+.3e} {c.detail}")
        return "\n".join(lines)


def psd_margin(S: Array) -> tuple[float, float]:
    """Return ``(min eigenvalue, tolerance)`` for a symmetric matrix."""
    S = 0.5 * (S + S.T)
    eig = np.linalg.eigvalsh(S)
    scale = max(np.abs(eig).max(initial=0.0), 1.0) if eig.size else 1.0
    return (float(eig.min()) if eig.size else 0.0), PSD_RTOL * scale


def _symmetric(S: Array) -> bool:
    return np.allclose(S, S.T, rtol=0.0, atol=PSD_RTOL * max(1.0, np.abs(S).max(initial=0.0)))


def _cost_checks(label: str, w: CostWeights, delta: float) -> list[AssumptionCheck]:
    out = []
    sym = _symmetric(w.G) and _symmetric(w.Q) and _symmetric(w.R)
    out.append(AssumptionCheck(f"{label}: G, Q, R symmetric", sym, 0.0))
    g_min, g_tol = psd_margin(w.G)
    out.append(AssumptionCheck(f"{label}: G >= 0", g_min >= -g_tol, g_min,
                               f"min eig {g_min:.3e}"))
    r_min = float(np.linalg.eigvalsh(0.5 * (w.R + w.R.T)).min())
    out.append(AssumptionCheck(f"{label}: R > delta I", r_min > delta, r_min - delta,
                               f"min eig {r_min:.3e}, delta {delta:.1e}"))
    if r_min > 0:
        S = w.Q - w.N @ np.linalg.solve(w.R, w.N.T)
        s_min, s_tol = psd_margin(S)
        passed = s_min >= -s_tol
        margin = 0.0 if abs(s_min) <= s_tol else s_min
        out.append(AssumptionCheck(f"{label}: Q - N R^-1 N' >= 0", passed, margin,
                                   f"min eig {s_min:.3e}"))
    else:
        out.append(AssumptionCheck(f"{label}: Q - N R^-1 N' >= 0", False, float("nan"),
                                   "R not invertible"))
    return out


def validate(spec: ModelSpec, raise_on_failure: bool = True) -> ValidationReport:
    """Check every standing assumption that can be decided from the matrices.

    Dimension problems are caught earlier, at construction.  Convexity failures
    raise :class:`ConvexityViolation` (carrying the report) unless
    ``raise_on_failure`` is false.  The function has no side effects.
    """
    checks: list[AssumptionCheck] = []
    chain = spec.chain
    off = chain.rates - np.diag(np.diag(chain.rates))
    checks.append(AssumptionCheck("chain: off-diagonal rates >= 0", bool((off >= 0).all()),
                                  float(off.min(initial=0.0))))
    checks.append(AssumptionCheck("chain: zero diagonal rates",
                                  bool(np.all(np.diag(chain.rates) == 0)), 0.0))
    p0 = chain.initial_dist
    checks.append(AssumptionCheck(
        "chain: initial distribution on simplex",
        bool((p0 >= 0).all() and abs(p0.sum() - 1.0) <= SIMPLEX_TOL),
        float(abs(p0.sum() - 1.0))))
    fr = spec.population.type_fractions
    checks.append(AssumptionCheck(
        "population: type fractions on simplex",
        bool((fr >= 0).all() and abs(fr.sum() - 1.0) <= SIMPLEX_TOL),
        float(abs(fr.sum() - 1.0))))
    checks.append(AssumptionCheck(
        "population: N_schedule >= 1",
        all(N >= 1 for N in spec.population.N_schedule), 0.0))
    if spec.population.wiener_cov is not None:
        c_min, c_tol = psd_margin(spec.population.wiener_cov)
        checks.append(AssumptionCheck("population: wiener_cov > 0", c_min > c_tol, c_min))
    if spec.filtering:
        sv = np.linalg.svd(spec.common.sigma, compute_uv=False)
        rank_ok = sv.size == spec.dims.d and sv.min() > 1e-12 * max(1.0, sv.max())
        checks.append(AssumptionCheck("common: sigma full row rank (filtering)",
                                      bool(rank_ok), float(sv.min(initial=0.0))))
    checks += _cost_checks("major", spec.major_cost, spec.delta)
    for k, w in enumerate(spec.minor_costs):
        checks += _cost_checks(f"minor[{k}]", w, spec.delta)
    report = ValidationReport(tuple(checks))
    if raise_on_failure:
        bad = report.failures()
        convexity = [c for c in bad if c.name.startswith(("major", "minor"))]
        if convexity:
            raise ConvexityViolation(
                "; ".join(f"{c.name} ({c.detail})" for c in convexity), report)
        if bad:
            raise ConfigError("; ".join(c.name for c in bad))
    return report


# ----------------------------------------------------------------------------
# extended systems
# ----------------------------------------------------------------------------

def impact_by_fraction(block: Array, fractions: Array, width: int) -> Array:
    """Scale column block k of ``block`` by ``fractions[k]`` (``F^pi``, ``H^pi``)."""
    out = np.array(block, dtype=np.float64)
    for k, p in enumerate(fractions):
        out[:, k * width:(k + 1) * width] *= p
    return out


def selector(k: int, n: int, K: int) -> Array:
    """``e_k``: an ``n x nK`` matrix with ``I_n`` in column block ``k``."""
    e = np.zeros((n, n * K))
    e[:, k * n:(k + 1) * n] = np.eye(n)
    return e


def lift(W: Array, total: int) -> Array:
    """``E' W E`` with ``E = [I, 0]``: embed ``W`` in the top-left corner."""
    out = np.zeros((total, total))
    s = W.shape[0]
    out[:s, :s] = W
    return out


@dataclass(frozen=True)
class MajorBlocks:
    y: slice
    x0: slice
    xbar: slice


@dataclass(frozen=True)
class MinorBlocks:
    x: slice
    y: slice
    x0: slice
    xbar: slice


def major_blocks(dims: Dimensions) -> MajorBlocks:
    n, d, K = dims.n, dims.d, dims.K
    return MajorBlocks(slice(0, d), slice(d, d + n), slice(d + n, d + n + n * K))


def minor_blocks(dims: Dimensions) -> MinorBlocks:
    n, d, K = dims.n, dims.d, dims.K
    return MinorBlocks(slice(0, n), slice(n, n + d), slice(n + d, 2 * n + d),
                       slice(2 * n + d, 2 * n + d + n * K))


@dataclass(frozen=True)
class ExtendedMajorSystem:
    A: Array          # (steps+1, D0, D0); time-varying through the gain trajectories
    B: Array          # (D0, m)
    Sigma: Array      # (D0, 2r + rK); bottom block rows are zero
    Q: Array
    N: Array
    G: Array
    R: Array
    F_pi: Array
    H_pi: Array
    b0: Array         # (steps+1, n)

    def forcing(self, j: int, fhat: Array, rbar: Array, mbar: Array) -> Array:
        """``M0_t = [fhat + F^pi rbar; b0(t); mbar]``, batched over leading axes."""
        fhat, rbar, mbar = np.asarray(fhat), np.asarray(rbar), np.asarray(mbar)
        lead = np.broadcast_shapes(fhat.shape[:-1], rbar.shape[:-1], mbar.shape[:-1])
        top = fhat + rbar @ self.F_pi.T
        mid = np.broadcast_to(self.b0[j], lead + (self.b0.shape[1],))
        return np.concatenate([np.broadcast_to(top, lead + top.shape[-1:]), mid,
                               np.broadcast_to(mbar, lead + mbar.shape[-1:])], axis=-1)


@dataclass(frozen=True)
class ExtendedMinorSystem:
    A: Array          # (steps+1, Dk, Dk)
    B: Array
    Sigma: Array
    Q: Array
    N: Array
    G: Array
    R: Array
    bk: Array         # (steps+1, n)
    major_B: Array
    major_Rinv: Array

    def forcing(self, j: int, M0: Array, s0: Array) -> Array:
        """``Mk_t = [b_k(t); M0_t - B0 R0^-1 B0' s0_t]``."""
        low = M0 - s0 @ (self.major_B @ self.major_Rinv @ self.major_B.T).T
        top = np.broadcast_to(self.bk[j], low.shape[:-1] + (self.bk.shape[1],))
        return np.concatenate([top, low], axis=-1)


def build_extended_major(spec: ModelSpec, gains) -> ExtendedMajorSystem:
    """Assemble the major agent's extended matrices on the shared grid.

    ``gains`` needs trajectories ``Cbar, Dbar, Ebar, Abar, Gbar, Lbar`` with a
    leading time axis of length ``steps + 1``.
    """
    dims = spec.dims
    n, m, r, d, K = dims.n, dims.m, dims.r, dims.d, dims.K
    T1 = spec.grid.steps + 1
    D0 = dims.major_ext
    c = spec.common
    fr = spec.population.type_fractions
    F_pi = impact_by_fraction(c.F, fr, m)
    H_pi = impact_by_fraction(c.H, fr, n)
    for name, shape in [("Cbar", (T1, m * K, n * K)), ("Dbar", (T1, m * K, n)),
                        ("Ebar", (T1, m * K, d)), ("Abar", (T1, n * K, n * K)),
                        ("Gbar", (T1, n * K, n)), ("Lbar", (T1, n * K, d))]:
        _expect(np.shape(getattr(gains, name)), shape, name)
    b = major_blocks(dims)
    A = np.zeros((T1, D0, D0))
    A[:, b.y, b.y] = F_pi @ gains.Ebar
    A[:, b.y, b.x0] = F_pi @ gains.Dbar + c.H0
    A[:, b.y, b.xbar] = F_pi @ gains.Cbar + H_pi
    A[:, b.x0, b.x0] = spec.major.A0
    A[:, b.xbar, b.y] = gains.Lbar
    A[:, b.xbar, b.x0] = gains.Gbar
    A[:, b.xbar, b.xbar] = gains.Abar
    B = np.zeros((D0, m))
    B[b.y] = c.F0
    B[b.x0] = spec.major.B0
    Sigma = np.zeros((D0, 2 * r + r * K))
    Sigma[b.y, :r] = c.sigma
    Sigma[b.x0, r:2 * r] = spec.major_sigma()
    w = spec.major_cost
    N = np.zeros((D0, m))
    N[: n + d] = w.N
    return ExtendedMajorSystem(
        A=A, B=B, Sigma=Sigma, Q=lift(w.Q, D0), N=N, G=lift(w.G, D0), R=np.array(w.R),
        F_pi=F_pi, H_pi=H_pi, b0=sample_forcing(spec.major.b0, spec.grid))


def closed_loop_major(major: ExtendedMajorSystem, Pi0: Array) -> Array:
    """``A0 - B0 R0^-1 N0' - B0 R0^-1 B0' Pi0`` for a trajectory ``Pi0``."""
    Rinv = np.linalg.inv(major.R)
    return major.A - major.B @ Rinv @ major.N.T - major.B @ Rinv @ major.B.T @ Pi0


def build_extended_minor(spec: ModelSpec, gains, major_riccati, k: int = 0,
                         major: ExtendedMajorSystem | None = None) -> ExtendedMinorSystem:
    """Assemble type ``k``'s extended system; the major Riccati must share the grid."""
    from .errors import GridMismatch

    dims = spec.dims
    n, m, r, d, K = dims.n, dims.m, dims.r, dims.d, dims.K
    T1 = spec.grid.steps + 1
    Pi0 = np.asarray(major_riccati.Pi)
    if Pi0.shape[0] != T1 or not np.allclose(major_riccati.grid.t, spec.grid.t):
        raise GridMismatch(f"major Riccati has {Pi0.shape[0]} samples, grid has {T1}")
    if major is None:
        major = build_extended_major(spec, gains)
    D0, Dk = dims.major_ext, dims.minor_ext
    A = np.zeros((T1, Dk, Dk))
    A[:, :n, :n] = spec.minors[k].Ak
    A[:, n:, n:] = closed_loop_major(major, Pi0)
    B = np.zeros((Dk, m))
    B[:n] = spec.minors[k].Bk
    Sigma = np.zeros((Dk, r + major.Sigma.shape[1]))
    Sigma[:n, :r] = spec.minor_sigma(k)
    Sigma[n:, r:] = major.Sigma
    w = spec.minor_costs[k]
    N = np.zeros((Dk, m))
    N[: n + d] = w.N
    return ExtendedMinorSystem(
        A=A, B=B, Sigma=Sigma, Q=lift(w.Q, Dk), N=N, G=lift(w.G, Dk), R=np.array(w.R),
        bk=sample_forcing(spec.minors[k].bk, spec.grid), major_B=major.B,
        major_Rinv=np.linalg.inv(major.R))


# ----------------------------------------------------------------------------
# configuration file loading
# ----------------------------------------------------------------------------

_TOP_KEYS = {"name", "dimensions", "grid", "major", "minors", "chain", "common", "costs",
             "population", "delta"}
_DIM_KEYS = {"n", "m", "r", "d", "K", "M"}
_GRID_KEYS = {"horizon", "steps"}
_DYN_KEYS = {"A", "B", "b", "sigma"}
_CHAIN_KEYS = {"states", "rates", "initial"}
_COMMON_KEYS = {"sigma", "F", "F0", "H", "H0", "kappa", "y0"}
_COSTS_KEYS = {"major", "minors"}
_WEIGHT_KEYS = {"G", "Q", "N", "R"}
_POP_KEYS = {"type_fractions", "N_schedule", "wiener_cov", "initial_mean", "initial_std"}


def _keys(section: Any, allowed: set[str], where: str, required: Sequence[str] = ()) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = [k for k in required if k not in section]
    if missing:
        raise ConfigError(f"{where}: missing keys {missing}")
    return section


def _forcing(value: Any, where: str) -> Array:
    if isinstance(value, dict):
        _keys(value, {"samples"}, where, ["samples"])
        return np.array(value["samples"], dtype=np.float64)
    return np.array(value, dtype=np.float64)


def model_from_dict(cfg: dict) -> ModelSpec:
    """Build a :class:`ModelSpec` from a parsed configuration tree."""
    _keys(cfg, _TOP_KEYS, "model",
          ["dimensions", "grid", "major", "minors", "chain", "common", "costs", "population"])
    dd = _keys(cfg["dimensions"], _DIM_KEYS, "dimensions", sorted(_DIM_KEYS))
    dims = Dimensions(**{k: int(v) for k, v in dd.items()})
    g = _keys(cfg["grid"], _GRID_KEYS, "grid", ["horizon", "steps"])
    grid = TimeGrid(float(g["horizon"]), int(g["steps"]))
    mj = _keys(cfg["major"], _DYN_KEYS, "major", ["A", "B", "sigma"])
    major = MajorDynamics(mj["A"], mj["B"], _forcing(mj.get("b", [0.0] * dims.n), "major.b"),
                          mj["sigma"])
    if not isinstance(cfg["minors"], list):
        raise ConfigError("minors: expected a list")
    minors = []
    for k, mk in enumerate(cfg["minors"]):
        mk = _keys(mk, _DYN_KEYS, f"minors[{k}]", ["A", "B", "sigma"])
        minors.append(MinorTypeDynamics(mk["A"], mk["B"],
                                        _forcing(mk.get("b", [0.0] * dims.n), f"minors[{k}].b"),
                                        mk["sigma"]))
    ch = _keys(cfg["chain"], _CHAIN_KEYS, "chain", ["states", "rates", "initial"])
    chain = LatentChainSpec(ch["states"], ch["rates"], ch["initial"])
    cm = _keys(cfg["common"], _COMMON_KEYS, "common", ["sigma", "F", "F0", "H", "H0"])
    common = CommonProcessSpec(
        sigma=cm["sigma"], F=cm["F"], F0=cm["F0"], H=cm["H"], H0=cm["H0"],
        kappa=cm.get("kappa", np.zeros((dims.d, dims.d))),
        y0=cm.get("y0", np.zeros(dims.d)))
    cs = _keys(cfg["costs"], _COSTS_KEYS, "costs", ["major", "minors"])
    major_cost = CostWeights(**_keys(cs["major"], _WEIGHT_KEYS, "costs.major",
                                     sorted(_WEIGHT_KEYS)))
    minor_costs = [CostWeights(**_keys(w, _WEIGHT_KEYS, f"costs.minors[{k}]",
                                       sorted(_WEIGHT_KEYS)))
                   for k, w in enumerate(cs["minors"])]
    pp = _keys(cfg["population"], _POP_KEYS, "population", ["type_fractions"])
    population = PopulationSpec(
        type_fractions=pp["type_fractions"],
        N_schedule=tuple(pp.get("N_schedule", (2, 5, 10, 20, 50))),
        wiener_cov=pp.get("wiener_cov"),
        initial_mean=pp.get("initial_mean"),
        initial_std=float(pp.get("initial_std", 0.0)))
    return ModelSpec(dims=dims, grid=grid, major=major, minors=tuple(minors), chain=chain,
                     common=common, major_cost=major_cost, minor_costs=tuple(minor_costs),
                     population=population, delta=float(cfg.get("delta", 1e-6)),
                     name=str(cfg.get("name", "model")))


def load_model(path: str | Path) -> ModelSpec:
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    return model_from_dict(cfg)


def bundled_model_path(name: str) -> Path:
    """Path of a model file shipped with the package (``decoupled``, ``reference``, ...)."""
    p = Path(__file__).parent / "models" / f"{name}.yaml"
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def load_bundled(name: str) -> ModelSpec:
    return load_model(bundled_model_path(name))
