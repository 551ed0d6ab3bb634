from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad_vec
from scipy.linalg import expm

from latentmfg.errors import BlowUp, DimensionMismatch
from latentmfg.model import TimeGrid
from latentmfg.riccati import RiccatiSolution, midpoint_residual, solve_backward

from oracles import scalar_lqr


def _scalar(a=0.0, b=1.0, q=1.0, r=1.0, g=0.0, steps=1000, T=1.0):
    grid = TimeGrid(T, steps)
    return grid, solve_backward([[a]], [[b]], [[q]], None, [[r]], [[g]], grid)


def test_tanh_closed_form():
    grid, sol = _scalar()
    err = np.abs(sol.Pi[:, 0, 0] - np.tanh(1.0 - grid.t)).max()
    assert err < 1e-6


def test_terminal_condition_exact():
    G = np.array([[2.0, 0.3], [0.3, 1.0]])
    grid = TimeGrid(1.0, 50)
    sol = solve_backward(np.eye(2) * 0.1, np.eye(2), np.eye(2), None, np.eye(2), G, grid)
    np.testing.assert_array_equal(sol.Pi[-1], G)


def test_zero_is_fixed_point():
    grid = TimeGrid(1.0, 20)
    sol = solve_backward(np.array([[0.5, 1.0], [0.0, -1.0]]), np.eye(2), np.zeros((2, 2)), None,
                         np.eye(2), np.zeros((2, 2)), grid)
    assert np.all(sol.Pi == 0)


def test_lyapunov_against_quadrature():
    A = np.array([[-0.5, 1.0], [0.2, -0.3]])
    Q = np.array([[1.0, 0.2], [0.2, 0.5]])
    G = np.array([[0.3, 0.0], [0.0, 0.1]])
    grid = TimeGrid(1.0, 200)
    sol = solve_backward(A, np.zeros((2, 1)), Q, None, np.eye(1), G, grid)
    for j in (0, 50, 150):
        tau = 1.0 - grid.t[j]
        integral, _ = quad_vec(lambda s: expm(A.T * s) @ Q @ expm(A * s), 0.0, tau,
                               epsabs=1e-13, epsrel=1e-13)
        exact = integral + expm(A.T * tau) @ G @ expm(A * tau)
        np.testing.assert_allclose(sol.Pi[j], exact, atol=1e-9)


def test_symmetry_and_psd(reference):
    spec, gains = reference
    for sol in [gains.Pi0, *gains.Pik]:
        assert sol.asymmetry() <= 1e-9
        assert sol.min_eigenvalue() >= -1e-8


def test_midpoint_residual_small():
    grid = TimeGrid(1.0, 100)
    A, B, Q = [[0.3]], [[1.0]], [[2.0]]
    sol = solve_backward(A, B, Q, None, [[1.0]], [[0.5]], grid)
    assert midpoint_residual(sol, A, B, Q, None, [[1.0]]).max() < 1e-3


def test_refinement_order_four():
    errs = []
    for steps in (10, 20, 40):
        grid, sol = _scalar(steps=steps)
        errs.append(abs(sol.Pi[0, 0, 0] - np.tanh(1.0)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 3.5)


def test_blow_up_reports_escape_time():
    # -p' = p^2 + 1 backward from p(T)=0 gives p = tan(T - t): escapes at T - pi/2
    grid = TimeGrid(3.0, 3000)
    with pytest.raises(BlowUp) as info:
        solve_backward([[0.0]], [[1.0]], [[1.0]], None, [[-1.0]], [[0.0]], grid)
    assert info.value.escape_time == pytest.approx(3.0 - np.pi / 2, abs=1e-2)


def test_shape_errors():
    with pytest.raises(DimensionMismatch):
        solve_backward(np.eye(2), np.eye(2), np.eye(3), None, np.eye(2), np.eye(2),
                       TimeGrid(1.0, 10))
    with pytest.raises(DimensionMismatch):
        solve_backward(np.zeros((5, 2, 2)), np.eye(2), np.eye(2), None, np.eye(2), np.eye(2),
                       TimeGrid(1.0, 10))


def test_csv_roundtrip(tmp_path):
    grid = TimeGrid(1.0, 10)
    sol = solve_backward(np.eye(2) * 0.2, np.eye(2), np.eye(2), None, np.eye(2), np.eye(2), grid)
    sol.to_csv(tmp_path / "pi.csv")
    back = RiccatiSolution.from_csv(tmp_path / "pi.csv")
    np.testing.assert_array_equal(back.Pi, sol.Pi)
    np.testing.assert_allclose(back.grid.t, grid.t)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-1.0, 1.0), b=st.floats(0.1, 2.0), q=st.floats(0.0, 3.0),
       r=st.floats(0.2, 2.0), g=st.floats(0.0, 2.0))
def test_scalar_matches_independent_rk4(a, b, q, r, g):
    grid = TimeGrid(1.0, 100)
    sol = solve_backward([[a]], [[b]], [[q]], None, [[r]], [[g]], grid)
    ref = scalar_lqr(a, b, q, r, g, grid.t)
    np.testing.assert_allclose(sol.Pi[:, 0, 0], ref, rtol=1e-12, atol=1e-12)
    assert sol.Pi[:, 0, 0].min() >= -1e-12
