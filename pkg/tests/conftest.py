"""Shared fixtures: expensive eigensolves and ensembles, built once per run.

Every heavy object is behind a keyed getter so that running a single test
module only pays for what it actually touches.
"""

import numpy as np
import pytest

from stochphase import longterm, phasemaps, reduction, simulate
from stochphase import operators as ops
from stochphase.models import model_from_key

# regime parameter tables used across criteria
REGIMES = {
    ("hopf", "above"): {},
    ("hopf", "below"): {"delta": -0.01},
    ("snic", "above"): {"m": 1.03},
    ("snic", "below"): {"m": 0.999},
}

GRID_N = 201


def build_pack(model_key, regime, D):
    params = dict(REGIMES[(model_key, regime)])
    params["D"] = D
    model = model_from_key(model_key, params)
    grid = ops.Grid2D.from_model(model, GRID_N, GRID_N)
    B = ops.assemble_backward(model, grid)
    F = ops.assemble_forward(model, grid, backward=B)
    P0 = ops.stationary_density(F, grid)
    pair = ops.slowest_mode(B, F)
    x_ref = phasemaps.default_x_ref(P0, pair.Q)
    psi, u = phasemaps.asymptotic_phase(pair, x_ref, model=model, P0=P0)
    return {"model": model, "grid": grid, "B": B, "F": F, "P0": P0,
            "pair": pair, "x_ref": x_ref, "psi": psi, "u": u}


@pytest.fixture(scope="session")
def pack():
    cache = {}

    def get(model_key, regime, D):
        key = (model_key, regime, D)
        if key not in cache:
            cache[key] = build_pack(model_key, regime, D)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def mrt(pack):
    """(MrtSolution, theta PhaseField) per planar case, default cut."""
    cache = {}

    def get(model_key, regime, D):
        key = (model_key, regime, D)
        if key not in cache:
            p = pack(model_key, regime, D)
            sol = phasemaps.mrt_solve(p["model"], p["grid"], backward=p["B"])
            theta = phasemaps.mrt_phase(sol, x_ref=p["x_ref"])
            cache[key] = (sol, theta)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def theta_km(pack, mrt):
    """Binned-increment drift/diffusion tables of the return-time phase."""
    cache = {}

    def get(model_key, regime, D, n_bins=100):
        key = (model_key, regime, D, n_bins)
        if key not in cache:
            p = pack(model_key, regime, D)
            _sol, theta = mrt(model_key, regime, D)
            spec = simulate.EnsembleSpec(n_traj=200, dt=2e-3, t_burn=20.0,
                                         t_end=140.0, seed=55)
            ens = simulate.ensemble(p["model"], spec)
            ser = [reduction.full_phase_series(tr, theta) for tr in ens]
            cache[key] = reduction.km_estimate(ser, dt=spec.dt, n_bins=n_bins,
                                               label="mrt")
        return cache[key]

    return get


@pytest.fixture(scope="session")
def fullstats(pack):
    """(LongTermStats, BinStats) of a large full-model ensemble per case."""
    cache = {}

    def get(model_key, regime, D):
        key = (model_key, regime, D)
        if key not in cache:
            p = pack(model_key, regime, D)
            spec = simulate.EnsembleSpec(n_traj=2500, dt=1e-2, t_burn=20.0,
                                         t_end=220.0, seed=100)
            cache[key] = longterm.full_phase_stats(p["model"], p["psi"], spec,
                                                   n_bins=100)
        return cache[key]

    return get
