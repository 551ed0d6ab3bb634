from __future__ import annotations

import numpy as np
import pytest

from latentmfg.errors import OffGrid, PathBudgetTooSmall, RankDeficientRegression
from latentmfg.meanfield import solve_consistency
from latentmfg.model import load_bundled, model_from_dict
from latentmfg.offset import (
    OffsetEstimator,
    _fit_slice,
    basis_exponents,
    design,
    design_gradient,
    evaluate_offset,
    joint_offset_system,
    martingale_diagnostics,
    raw_features,
    simulate_observations,
    solve_joint_offsets,
)

from conftest import variant
from oracles import affine_offset_oracle, rk4_backward, interp


def deterministic_ode(system, fhat, t):
    """``-S' = A S + c + ell fhat`` with ``S_T = 0`` and a fixed drift value."""
    def rhs(j, theta, S):
        return -(interp(system.A, j, theta) @ S + interp(system.c, j, theta)
                 + interp(system.ell, j, theta) @ fhat)
    return rk4_backward(rhs, np.zeros(system.A.shape[1]), t)


def oracle_on_reference(spec, gains):
    system = joint_offset_system(spec, gains)
    return system, affine_offset_oracle(system, spec.chain.states, spec.chain.generator,
                                        spec.common.kappa, spec.grid.t)


def test_zero_forcing_gives_zero_offsets():
    cfg = variant("weak", **{"major.b": [0.0], "minors.0.b": [0.0], "chain.states": [[0.0]]})
    spec = model_from_dict(cfg)
    gains = solve_consistency(spec)
    est = solve_joint_offsets(spec, gains, paths=100, seed=0)
    assert np.all(est.coefs == 0)


def test_reduces_to_deterministic_offsets(weak):
    # M = 1 and kappa = 0: the forcing is deterministic
    spec, gains = weak
    est = solve_joint_offsets(spec, gains, paths=100, seed=0)
    system = joint_offset_system(spec, gains)
    ode = deterministic_ode(system, spec.chain.states[0], spec.grid.t)
    yL = np.broadcast_to(spec.common.y0, (1, 1))
    got = np.stack([est.evaluate_index(j, yL, np.ones((1, 1)))[0]
                    for j in range(spec.grid.steps + 1)])
    rel = np.abs(got - ode).max() / np.abs(ode).max()
    assert rel < 1e-4


def _oracle_rms(spec, gains, est, times):
    _, (alpha, Beta) = oracle_on_reference(spec, gains)
    yL, pi, _, _ = simulate_observations(spec, 500, seed=99, offset=5_000_000)
    out = []
    for t in times:
        j = spec.grid.index_of(t)
        z = np.concatenate([pi[:, j], yL[:, j]], axis=1)
        exact = alpha[j] + z @ Beta[j].T
        got = est.evaluate_index(j, yL[:, j], pi[:, j])
        out.append(np.sqrt(np.mean((got - exact) ** 2, axis=0)).max())
    return np.array(out)


def test_matches_affine_oracle_on_reference(reference, reference_offsets):
    spec, gains = reference
    est = reference_offsets
    _, (alpha, Beta) = oracle_on_reference(spec, gains)
    z0 = np.concatenate([spec.chain.initial_dist, spec.common.y0])
    exact0 = alpha[0] + Beta[0] @ z0
    got0 = est.evaluate_index(0, spec.common.y0, spec.chain.initial_dist)
    assert np.abs(got0 - exact0).max() < 1e-3 * max(1.0, np.abs(exact0).max())
    # away from t = 0 the Euler filter leaves an O(dt) bias
    assert np.all(_oracle_rms(spec, gains, est, (0.1, 0.25, 0.5, 0.75)) < 1.5 * spec.grid.dt)


@pytest.mark.slow
def test_oracle_gap_is_first_order_in_dt():
    errs = []
    for steps in (100, 200):
        spec = model_from_dict(variant("reference", **{"grid.steps": steps}))
        gains = solve_consistency(spec)
        est = solve_joint_offsets(spec, gains, paths=2000, seed=1)
        errs.append(_oracle_rms(spec, gains, est, (0.1, 0.25, 0.5)))
    ratio = errs[0] / errs[1]
    assert np.all((ratio > 1.6) & (ratio < 2.6))


def test_martingale_diagnostics_reference(reference, reference_offsets):
    spec, gains = reference
    diag = martingale_diagnostics(spec, gains, reference_offsets, paths=2000, seed=2)
    assert diag.terminal_norm == 0.0
    assert diag.pass_fraction >= 0.95


def test_path_budget_too_small(reference):
    spec, gains = reference
    with pytest.raises(PathBudgetTooSmall):
        solve_joint_offsets(spec, gains, paths=50, seed=0)


def test_rank_deficient_regression():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(200)
    # two variables tied by a non-affine relation make the quadratic basis collinear
    z = np.column_stack([a, a ** 2])
    Y = rng.standard_normal((200, 1))
    with pytest.raises(RankDeficientRegression):
        _fit_slice(z, Y, basis_exponents(2, 2), 3)


def test_affine_redundant_variable_is_frozen():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(200)
    z = np.column_stack([a, 2.0 * a + 1.0])
    mean, scale, coefs, fitted = _fit_slice(z, (3 * a)[:, None], basis_exponents(2, 2), 1)
    assert scale[1] == 0 and scale[0] > 0
    np.testing.assert_allclose(fitted[:, 0], 3 * a, atol=1e-12)


def test_off_grid_and_terminal(reference, reference_offsets):
    spec, _ = reference
    est = reference_offsets
    with pytest.raises(OffGrid):
        evaluate_offset(est, 0.0051, spec.common.y0, spec.chain.initial_dist)
    s0, sbar = evaluate_offset(est, 1.0, np.array([0.7]), np.array([0.2, 0.8]))
    assert np.all(s0 == 0) and all(np.all(s == 0) for s in sbar)
    assert s0.shape == (spec.dims.major_ext,) and sbar[0].shape == (spec.dims.minor_ext,)


def test_single_state_ignores_pi(weak):
    spec, gains = weak
    est = solve_joint_offsets(spec, gains, paths=100, seed=0)
    yL = np.array([[0.1], [0.4]])
    np.testing.assert_array_equal(est.evaluate_index(30, yL, np.ones((2, 1))),
                                  est.evaluate_index(30, yL, np.full((2, 1), 7.0)))


def test_in_sample_fit_small(reference_offsets):
    est = reference_offsets
    assert np.all(np.isfinite(est.fit_rms))
    assert est.fit_rms.max() < 0.05


def test_save_load_roundtrip(tmp_path, reference_offsets):
    est = reference_offsets
    est.save(tmp_path / "off.npz")
    back = OffsetEstimator.load(tmp_path / "off.npz")
    np.testing.assert_array_equal(back.coefs, est.coefs)
    assert back.basis_description == est.basis_description
    yL, pi = np.array([[0.3]]), np.array([[0.4, 0.6]])
    np.testing.assert_array_equal(back.evaluate_index(10, yL, pi), est.evaluate_index(10, yL, pi))


def test_doubling_paths_stable(reference, reference_offsets):
    spec, gains = reference
    small = solve_joint_offsets(spec, gains, paths=1000, seed=7)
    big = solve_joint_offsets(spec, gains, paths=2000, seed=8)
    y0, p0 = spec.common.y0, spec.chain.initial_dist
    a = small.evaluate_index(0, y0, p0)
    b = big.evaluate_index(0, y0, p0)
    ref = reference_offsets.evaluate_index(0, y0, p0)
    assert np.abs(a - b).max() < 1e-3 * max(1.0, np.abs(ref).max())


def test_basis_and_gradient():
    mons = basis_exponents(2, 2)
    assert mons == [(), (0,), (1,), (0, 0), (0, 1), (1, 1)]
    z = np.array([[0.5, -2.0]])
    np.testing.assert_allclose(design(z, mons)[0], [1, 0.5, -2.0, 0.25, -1.0, 4.0])
    g = design_gradient(z, mons)[0]
    np.testing.assert_allclose(g[3], [1.0, 0.0])
    np.testing.assert_allclose(g[4], [-2.0, 0.5])
    np.testing.assert_allclose(g[5], [0.0, -4.0])


def test_raw_features_drop_last_pi():
    z = raw_features(np.array([[1.0]]), np.array([[0.2, 0.3, 0.5]]))
    np.testing.assert_array_equal(z, [[1.0, 0.2, 0.3]])
