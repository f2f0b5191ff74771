"""Long-term rotation and diffusion statistics: quadrature and sampling paths."""

import numpy as np
import pytest

from stochphase.longterm import (
    StiffnessError,
    UnderpoweredError,
    analytic_stats,
    empirical_stats,
    reduced_mc_stats,
    stats_table_csv,
)
from stochphase.reduction import ReducedPhaseModel, bin_centers, smooth_periodic
from stochphase.simulate import PhaseSeries

TWO_PI = 2.0 * np.pi


def tables(a_fn, d_fn, n_bins=100, smooth=None):
    phi = bin_centers(n_bins)
    m = ReducedPhaseModel(label="asymptotic", n_bins=n_bins, phi=phi,
                          a=a_fn(phi), D=d_fn(phi),
                          counts=np.full(n_bins, 1000, dtype=np.int64))
    return smooth_periodic(m, order=smooth) if smooth else m


def brownian_series(omega, D, n, seed, t_end=20.0, dt=0.05):
    rng = np.random.default_rng(seed)
    t = np.arange(int(t_end / dt) + 1) * dt
    out = []
    for _ in range(n):
        steps = omega * dt + np.sqrt(2 * D * dt) * rng.standard_normal(t.size - 1)
        u = np.concatenate([[0.0], np.cumsum(steps)])
        out.append(PhaseSeries(times=t, wrapped=np.mod(u, TWO_PI), unwrapped=u))
    return out


def test_constant_closure_is_exact():
    m = tables(lambda p: np.full(p.size, 3.5), lambda p: np.full(p.size, 0.05))
    st = analytic_stats(m)
    assert abs(st.omega_eff - 3.5) < 1e-10
    assert abs(st.D_eff - 0.05) < 1e-10


def test_mesh_doubling_invariance():
    m = tables(lambda p: 3.0 + np.sin(p) + 0.3 * np.cos(2 * p),
               lambda p: 0.05 + 0.01 * np.cos(p), smooth=8)
    a = analytic_stats(m, mesh=2048)
    b = analytic_stats(m, mesh=4096)
    assert abs(a.omega_eff - b.omega_eff) < 1e-6 * abs(b.omega_eff)
    assert abs(a.D_eff - b.D_eff) < 1e-6 * b.D_eff


def test_analytic_matches_reduced_mc():
    m = tables(lambda p: 3.5 + 0.5 * np.sin(p),
               lambda p: np.full(p.size, 0.05), smooth=8)
    an = analytic_stats(m)
    mc = reduced_mc_stats(m, n_traj=400, t_window=25.0, dt=2e-3, seed=12)
    assert abs(mc.omega_eff - an.omega_eff) < 3 * mc.stderr_omega
    assert abs(mc.D_eff - an.D_eff) < 3 * mc.stderr_D


def test_stiffness_guards():
    with pytest.raises(StiffnessError):
        analytic_stats(tables(lambda p: np.full(p.size, 1.0),
                              lambda p: np.full(p.size, 1e-9)))
    # strongly negative mean drift overflows the continuation factor
    with pytest.raises(StiffnessError):
        analytic_stats(tables(lambda p: np.full(p.size, -1.0),
                              lambda p: np.full(p.size, 0.005)))


def test_empirical_stats_recovers_drift_and_diffusion():
    ens = brownian_series(omega=2.0, D=0.3, n=300, seed=4)
    st = empirical_stats(ens, t_window=15.0)
    assert st.n_traj == 300
    assert abs(st.omega_eff - 2.0) < 3 * st.stderr_omega
    assert abs(st.D_eff - 0.3) < 3 * st.stderr_D


def test_empirical_stats_window_validation():
    ens = brownian_series(omega=1.0, D=0.1, n=40, seed=5, t_end=5.0)
    with pytest.raises(ValueError):
        empirical_stats(ens, t_window=50.0)


def test_underpowered_ensemble_rejected():
    ens = brownian_series(omega=1.0, D=0.1, n=5, seed=6)
    with pytest.raises(UnderpoweredError):
        empirical_stats(ens, t_window=10.0)


def test_stats_table_round_trip(tmp_path):
    ens = brownian_series(omega=1.0, D=0.1, n=40, seed=7)
    st = empirical_stats(ens, t_window=10.0)
    path = tmp_path / "stats.csv"
    stats_table_csv(path, [("hopf", "above", 0.01, "empirical", st)])
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "model,regime,D,source,omega_eff,D_eff,stderr_omega,stderr_D"
    cells = lines[1].split(",")
    assert cells[:4] == ["hopf", "above", "0.01", "empirical"]
    assert float(cells[4]) == pytest.approx(st.omega_eff, rel=1e-9)
