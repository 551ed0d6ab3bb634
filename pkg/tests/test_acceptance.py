"""Acceptance criteria, one test each; results are listed in the terminal summary."""

from __future__ import annotations

import csv
import time
import warnings

import numpy as np
import pytest

from latentmfg.cli import EXIT_OK, ExperimentConfig, run
from latentmfg.errors import BudgetExhausted
from latentmfg.meanfield import check_hurwitz, fixed_point_residual, solve_consistency
from latentmfg.model import TimeGrid, load_bundled, major_blocks, minor_blocks
from latentmfg.nash import gap_curve
from latentmfg.offset import joint_offset_system, solve_joint_offsets
from latentmfg.riccati import solve_backward

from conftest import ACCEPTANCE
from oracles import particle_filter, rk4_backward, interp, scalar_lqr
from test_wonham import observe, oracle_spec
from latentmfg.wonham import run_filter

pytestmark = pytest.mark.filterwarnings("ignore::latentmfg.errors.BudgetExhausted")

SEED = 11


def record(num: int, ok: bool, text: str) -> None:
    ACCEPTANCE.append((num, bool(ok), text))
    assert ok, text


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def non_increasing(values, ses, k=2.0):
    """Each step rises by at most ``k`` combined standard errors."""
    v, s = np.asarray(values, float), np.asarray(ses, float)
    return bool(np.all(v[1:] <= v[:-1] + k * np.hypot(s[1:], s[:-1])))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("reference_run")
    t0 = time.perf_counter()
    code, manifest = run(ExperimentConfig(model="reference", out=str(out), seed=SEED))
    return code, manifest, out, time.perf_counter() - t0


def test_criterion_1_wonham_vs_particle_filter():
    t0 = time.perf_counter()
    spec = oracle_spec(steps=1000)
    _, yL, _ = observe(spec, SEED)
    out = run_filter(yL, spec.grid, spec.chain, spec.common)
    pf = particle_filter(yL, spec.grid.dt, spec.chain.states, spec.chain.generator,
                         spec.chain.initial_dist, spec.common.sigma, spec.common.kappa,
                         10_000, np.random.default_rng(SEED))
    secs = time.perf_counter() - t0
    gap = float(np.abs(out.pi - pf).mean())
    simplex = bool(np.all(out.pi >= 0) and np.allclose(out.pi.sum(axis=1), 1.0, atol=1e-10))
    record(1, gap < 0.05 and simplex and secs < 60,
           f"Wonham vs particle filter: mean |gap| {gap:.4f} (< 0.05), simplex {simplex}, "
           f"{secs:.1f}s (< 60s)")


def test_criterion_2_tanh_riccati():
    t0 = time.perf_counter()
    grid = TimeGrid(1.0, 1000)
    sol = solve_backward([[0.0]], [[1.0]], [[1.0]], None, [[1.0]], [[0.0]], grid)
    secs = time.perf_counter() - t0
    err = float(np.abs(sol.Pi[:, 0, 0] - np.tanh(1.0 - grid.t)).max())
    record(2, err < 1e-6 and secs < 1.0,
           f"scalar Riccati vs tanh(T-t): max error {err:.2e} (< 1e-6), {secs:.3f}s (< 1s)")


def test_criterion_3_consistency():
    spec = load_bundled("decoupled")
    gains = solve_consistency(spec)
    t = spec.grid.t
    p_minor = scalar_lqr(-0.3, 1.0, 1.0, 1.0, 1.0, t)
    p_major = scalar_lqr(0.2, 1.0, 2.0, 1.0, 1.0, t)
    b, mb = minor_blocks(spec.dims), major_blocks(spec.dims)
    err = max(np.linalg.norm(gains.Pik[0].Pi[:, b.x, b.x][:, 0, 0] - p_minor),
              np.linalg.norm(gains.Cbar[:, 0, 0] + p_minor),
              np.linalg.norm(gains.Pi0.Pi[:, mb.x0, mb.x0][:, 0, 0] - p_major))
    ref = load_bundled("reference")
    rg = solve_consistency(ref, max_iter=100)
    res = fixed_point_residual(ref, rg)["gains"]
    hur = check_hurwitz(rg, ref)
    record(3, err < 1e-10 and res < 1e-8 and rg.iterations <= 100 and hur.passed,
           f"decoupled vs LQR {err:.1e} (< 1e-10); reference residual {res:.1e} (< 1e-8) "
           f"after {rg.iterations} iterations; Hurwitz max eig {hur.max_real_eig:.3f}")


def test_criterion_4_deterministic_reduction():
    spec = load_bundled("weak")            # M = 1, kappa = 0: deterministic forcing
    gains = solve_consistency(spec)
    est = solve_joint_offsets(spec, gains, paths=100, seed=SEED)
    system = joint_offset_system(spec, gains)
    f = spec.chain.states[0]

    def rhs(j, theta, S):
        return -(interp(system.A, j, theta) @ S + interp(system.c, j, theta)
                 + interp(system.ell, j, theta) @ f)

    ode = rk4_backward(rhs, np.zeros(system.size), spec.grid.t)
    got = np.stack([est.evaluate_index(j, spec.common.y0, np.ones(1))
                    for j in range(spec.grid.steps + 1)])
    rel = float(np.abs(got - ode).max() / np.abs(ode).max())
    record(4, rel < 1e-4, f"M=1 regression offsets vs backward ODE: relative error {rel:.1e} "
                          "(< 1e-4)")


def test_criterion_5_bsde_diagnostics(pipeline):
    code, manifest, out, _ = pipeline
    assert code == EXIT_OK, manifest["status"]
    off = manifest["stages"]["offsets"]
    frac, norm = off["martingale_pass_fraction"], off["terminal_norm"]
    rows = read_rows(out / "offset_diagnostics.csv")
    assert len(rows) == 100
    record(5, norm == 0.0 and frac >= 0.95,
           f"BSDE: |S_T| = {norm} (exactly 0); martingale test passes on {frac:.1%} of slices "
           "(>= 95%)")


def test_criterion_6_second_moments(pipeline):
    code, manifest, out, _ = pipeline
    assert code == EXIT_OK, manifest["status"]
    rows = read_rows(out / "cost_summary.csv")
    worst = []
    ok = True
    for q in ("x", "x_avg", "xbar", "y"):
        v = np.array([float(r[f"m2_{q}"]) for r in rows])
        se = np.array([float(r[f"m2_{q}_se"]) for r in rows])
        excess = (v - v[0]) / np.hypot(se, se[0]).clip(1e-300)
        ok &= bool(np.all(np.isfinite(v)) and excess[1:].max() <= 2.0)
        worst.append(f"{q} {v.max():.3f}")
    Ns = [int(r["N"]) for r in rows]
    record(6, ok and Ns == [2, 5, 10, 20, 50],
           f"second moments over N={Ns}: no rise beyond 2 SE over N=2 (sup values "
           + ", ".join(worst) + ")")


def test_criterion_7_gap_curve(pipeline):
    code, manifest, out, secs = pipeline
    assert code == EXIT_OK, manifest["status"]
    rows = read_rows(out / "gap_curve.csv")
    gap = [float(r["gap"]) for r in rows]
    se = [float(r["stderr"]) for r in rows]
    t0 = time.perf_counter()
    spec = load_bundled("decoupled")
    gains = solve_consistency(spec)
    est = solve_joint_offsets(spec, gains, paths=4000, seed=SEED)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BudgetExhausted)
        null = gap_curve(spec, gains, est, role="minor-1", budget=100, seed=SEED)
    null_secs = time.perf_counter() - t0
    null_ok = all(e.gap <= 3 * e.stderr for e in null)
    ok = non_increasing(gap, se) and gap[-1] < gap[0] and null_ok and secs < 600
    record(7, ok,
           "gap curve minor-1 " + ", ".join(f"{g:.4f}±{s:.4f}" for g, s in zip(gap, se))
           + f"; decoupled max gap/SE {max(e.gap / max(e.stderr, 1e-300) for e in null):.2f} "
           f"(<= 3); pipeline {secs:.0f}s (<= 600s), null curve {null_secs:.0f}s")


def test_criterion_8_cost_convergence(pipeline):
    code, manifest, out, _ = pipeline
    assert code == EXIT_OK, manifest["status"]
    rows = read_rows(out / "cost_summary.csv")
    K = load_bundled("reference").dims.K
    series = {"major": ("J0_gap", "J0_gap_se")}
    series.update({f"type {k}": (f"J{k}_gap", f"J{k}_gap_se") for k in range(1, K + 1)})
    ok, parts = True, []
    for name, (g, s) in series.items():
        v = np.array([float(r[g]) for r in rows])
        se = np.array([float(r[s]) for r in rows])
        good = non_increasing(v, se) and v[-1] <= v[0] + 2 * np.hypot(se[-1], se[0])
        ok &= good
        parts.append(f"{name} " + "/".join(f"{x:.4f}" for x in v))
    record(8, ok, "|J^N - J^inf| non-increasing within 2 SE: " + "; ".join(parts))


def test_criterion_9_reproducibility(tmp_path):
    small = dict(offset_paths=500, diagnostic_paths=500, sim_paths=40, gap_budget=10,
                 gap_train_paths=40, gap_score_paths=40)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, _ = run(ExperimentConfig(model="reference", out=str(out), seed=SEED, **small))
        assert code == EXIT_OK
        outs.append(out)
    files = sorted(p.name for p in outs[0].glob("*.csv"))
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    record(9, same and len(files) >= 8,
           f"{len(files)} CSV outputs byte-identical across two runs: {same}")
