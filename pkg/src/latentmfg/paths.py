"""Random streams and latent-chain path generation.

Every random draw comes from a generator keyed by ``(seed, path, stream)`` so a
path's chain, common noise and each agent's noise are independent, reproducible
and unaffected by how many other paths or agents are simulated.  Stream 0 is the
path-level stream (chain, latent Wiener process, type draws); stream ``a + 1``
belongs to agent ``a`` (``a = 0`` is the major agent).
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

from .model import LatentChainSpec, TimeGrid

Array = NDArray[np.float64]


def stream(seed: int, path: int, stream_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(path), int(stream_id)]))


def chain_path(chain: LatentChainSpec, grid: TimeGrid, rng: np.random.Generator) -> NDArray[np.int64]:
    """Chain state index on the grid from exact exponential holding times.

    A jump at time ``tau`` takes effect at the first grid point ``t_j >= tau``.
    """
    M = chain.M
    state = int(rng.choice(M, p=chain.initial_dist)) if M > 1 else 0
    out = np.full(grid.steps + 1, state, dtype=np.int64)
    if M == 1:
        return out
    exit_rates = chain.exit_rates
    off = chain.rates - np.diag(np.diag(chain.rates))
    t = 0.0
    times, states = [], []
    while True:
        rate = exit_rates[state]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= grid.horizon:
            break
        state = int(rng.choice(M, p=off[state] / rate))
        times.append(t)
        states.append(state)
    if times:
        # grid index where each jump lands
        land = np.ceil(np.asarray(times) / grid.dt - 1e-12).astype(np.int64)
        for j, s in zip(land, states):
            out[j:] = s
    return out


def latent_paths(chain: LatentChainSpec, grid: TimeGrid, r: int, paths: int, seed: int,
                 offset: int = 0) -> tuple[NDArray[np.int64], Array]:
    """Chain indices ``(P, steps+1)`` and latent Wiener increments ``(P, steps, r)``."""
    idx = np.empty((paths, grid.steps + 1), dtype=np.int64)
    dW = np.empty((paths, grid.steps, r))
    sq = np.sqrt(grid.dt)
    for p in range(paths):
        rng = stream(seed, offset + p, 0)
        idx[p] = chain_path(chain, grid, rng)
        dW[p] = rng.standard_normal((grid.steps, r)) * sq
    return idx, dW
