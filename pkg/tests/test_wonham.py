from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from latentmfg.errors import SingularSigma
from latentmfg.model import model_from_dict
from latentmfg.paths import chain_path
from latentmfg.wonham import (
    FilterState,
    filter_step,
    filtered_drift,
    innovation_increment,
    run_filter,
    wonham_update,
)

from conftest import variant
from oracles import particle_filter


def oracle_spec(steps=1000, states=((-1.0,), (1.0,)), rates=((0.0, 1.0), (1.0, 0.0)),
                sigma=1.0, kappa=0.0, initial=(0.5, 0.5)):
    M = len(states)
    cfg = variant("reference", **{
        "grid.steps": steps,
        "dimensions.M": M,
        "chain.states": [list(s) for s in states],
        "chain.rates": [list(r) for r in rates],
        "chain.initial": list(initial),
        "common.sigma": [[sigma]],
        "common.kappa": [[kappa]],
    })
    return model_from_dict(cfg)


def observe(spec, seed):
    """Chain path and observation path ``dyL = f(gamma) dt + sigma dw``."""
    rng = np.random.default_rng(seed)
    grid, c = spec.grid, spec.common
    idx = chain_path(spec.chain, grid, rng)
    dW = rng.standard_normal((grid.steps, c.sigma.shape[1])) * np.sqrt(grid.dt)
    yL = np.empty((grid.steps + 1, c.sigma.shape[0]))
    yL[0] = c.y0
    for j in range(grid.steps):
        f = c.drift_all(grid.t[j], yL[j], spec.chain.states)[idx[j]]
        yL[j + 1] = yL[j] + f * grid.dt + c.sigma @ dW[j]
    return idx, yL, dW


def test_single_state_stays_at_one():
    spec = oracle_spec(steps=50, states=((0.3,),), rates=((0.0,),), initial=(1.0,))
    _, yL, _ = observe(spec, 0)
    out = run_filter(yL, spec.grid, spec.chain, spec.common)
    assert np.all(out.pi == 1.0)


def test_uninformative_zero_rates_constant():
    spec = oracle_spec(steps=200, states=((0.4,), (0.4,)), rates=((0.0, 0.0), (0.0, 0.0)),
                       initial=(0.3, 0.7))
    _, yL, _ = observe(spec, 1)
    out = run_filter(yL, spec.grid, spec.chain, spec.common)
    np.testing.assert_allclose(out.pi, np.tile([0.3, 0.7], (201, 1)), atol=1e-15)


def test_uninformative_relaxes_like_kolmogorov():
    rates = ((0.0, 2.0), (1.0, 0.0))
    errs = []
    for steps in (100, 200, 400):
        spec = oracle_spec(steps=steps, states=((0.0,), (0.0,)), rates=rates, initial=(1.0, 0.0))
        _, yL, _ = observe(spec, 2)
        out = run_filter(yL, spec.grid, spec.chain, spec.common)
        V = spec.chain.generator
        exact = np.array([np.array([1.0, 0.0]) @ expm(V * t) for t in spec.grid.t])
        # closed form: pi_1 = 1/3 + 2/3 exp(-3t)
        np.testing.assert_allclose(exact[:, 0], 1 / 3 + 2 / 3 * np.exp(-3 * spec.grid.t),
                                   atol=1e-12)
        errs.append(np.abs(out.pi - exact).max())
    rates_obs = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert errs[0] < 0.02
    assert np.all(rates_obs > 0.8)


def test_matches_particle_filter():
    spec = oracle_spec(steps=1000)
    _, yL, _ = observe(spec, 3)
    out = run_filter(yL, spec.grid, spec.chain, spec.common)
    pf = particle_filter(yL, spec.grid.dt, spec.chain.states, spec.chain.generator,
                         spec.chain.initial_dist, spec.common.sigma, spec.common.kappa,
                         10_000, np.random.default_rng(4))
    assert np.abs(out.pi - pf).mean() < 0.05
    assert np.all(out.pi >= 0) and np.allclose(out.pi.sum(axis=1), 1.0, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), sigma=st.floats(0.05, 2.0), kappa=st.floats(-1.0, 1.0),
       g=st.floats(0.5, 3.0))
def test_simplex_invariant(seed, sigma, kappa, g):
    spec = oracle_spec(steps=200, states=((-g,), (0.0,), (g,)),
                       rates=((0.0, 1.0, 0.5), (2.0, 0.0, 1.0), (0.3, 0.3, 0.0)),
                       sigma=sigma, kappa=kappa, initial=(0.2, 0.5, 0.3))
    _, yL, _ = observe(spec, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = run_filter(yL, spec.grid, spec.chain, spec.common)
    assert np.all(out.pi >= 0) and np.all(out.pi <= 1)
    np.testing.assert_allclose(out.pi.sum(axis=1), 1.0, atol=1e-10)
    fh = filtered_drift(out.pi, yL, 0.0, spec.chain, spec.common)
    np.testing.assert_allclose(out.fhat, fh, atol=1e-12)


def test_singular_sigma_raises():
    spec = oracle_spec(steps=10, sigma=0.0)
    state = FilterState.initial(spec.chain, spec.common)
    with pytest.raises(SingularSigma):
        filter_step(state, np.array([0.1]), 0.1, spec.chain, spec.common, np.zeros(1))


def test_nonpositive_dt_rejected():
    spec = oracle_spec(steps=10)
    state = FilterState.initial(spec.chain, spec.common)
    with pytest.raises(ValueError):
        filter_step(state, np.zeros(1), 0.0, spec.chain, spec.common, np.zeros(1))


def test_negativity_warning_on_coarse_step():
    spec = oracle_spec(steps=10, states=((-20.0,), (20.0,)), sigma=0.1)
    state = FilterState.initial(spec.chain, spec.common)
    with pytest.warns(RuntimeWarning, match="below"):
        new = filter_step(state, np.array([5.0]), 0.1, spec.chain, spec.common, np.zeros(1))
    assert new.pi.min() >= 0 and new.pi.sum() == pytest.approx(1.0)


def test_innovation_recovers_noise_single_state():
    spec = oracle_spec(steps=100, states=((0.3,),), rates=((0.0,),), initial=(1.0,),
                       sigma=0.7, kappa=-0.4)
    _, yL, dW = observe(spec, 5)
    out = run_filter(yL, spec.grid, spec.chain, spec.common)
    np.testing.assert_allclose(np.diff(out.innovation, axis=0), dW, atol=1e-12)


def test_innovation_zero_increment():
    spec = oracle_spec(steps=10, states=((0.0,), (0.0,)))
    state = FilterState.initial(spec.chain, spec.common)
    assert np.all(innovation_increment(state, np.zeros(1), 0.1, spec.common) == 0)


def test_innovation_variance_and_mean():
    spec = oracle_spec(steps=200)
    grid, c, chain = spec.grid, spec.common, spec.chain
    P = 1000
    rng = np.random.default_rng(7)
    idx = np.array([chain_path(chain, grid, rng) for _ in range(P)])
    dW = rng.standard_normal((P, grid.steps)) * np.sqrt(grid.dt)
    pi = np.tile(chain.initial_dist, (P, 1))
    yL = np.zeros((P, 1))
    w_hat = np.zeros(P)
    for j in range(grid.steps):
        dyL = chain.states[idx[:, j]] * grid.dt + c.sigma[0, 0] * dW[:, j:j + 1]
        pi, fhat, _ = wonham_update(pi, yL, dyL, grid.dt, grid.t[j], chain, c)
        w_hat += (dyL[:, 0] - fhat[:, 0] * grid.dt) / c.sigma[0, 0]
        yL = yL + dyL
    assert 0.9 <= w_hat.var() <= 1.1
    assert abs(w_hat.mean()) < 3 / np.sqrt(P)


def test_csv_export(tmp_path):
    spec = oracle_spec(steps=20)
    _, yL, _ = observe(spec, 6)
    out = run_filter(yL, spec.grid, spec.chain, spec.common)
    out.to_csv(tmp_path / "filter.csv")
    data = np.loadtxt(tmp_path / "filter.csv", delimiter=",", skiprows=1)
    with open(tmp_path / "filter.csv") as fh:
        assert fh.readline().strip() == "t,pi_1,pi_2,fhat_1"
    np.testing.assert_array_equal(data[:, 1:3], out.pi)
    np.testing.assert_array_equal(data[:, 3], out.fhat[:, 0])
