"""Integrator, ensemble bookkeeping and circular-series utilities."""

import numpy as np
import pytest

from stochphase import simulate
from stochphase.models import model_from_key
from stochphase.simulate import (AliasingWarning, EnsembleSpec, Trajectory,
                                 child_rng, circular_diff, ensemble,
                                 euler_maruyama, evolve_states,
                                 stationary_states, unwrap, wrap_angle)

TWO_PI = 2 * np.pi


def test_wrap_angle_range():
    x = np.linspace(-20, 20, 1001)
    w = wrap_angle(x)
    assert np.all((w >= 0) & (w < TWO_PI))
    assert np.allclose(np.exp(1j * w), np.exp(1j * x))


def test_circular_diff_branch():
    a = np.array([0.1, 6.2, 3.0])
    b = np.array([6.2, 0.1, 3.1])
    d = circular_diff(b, a)
    assert np.all((d > -np.pi) & (d <= np.pi))
    assert np.allclose(wrap_angle(a + d), wrap_angle(b))


def test_unwrap_round_trip():
    rng = np.random.default_rng(3)
    inc = rng.uniform(-2.0, 2.5, size=400)
    true = 1.3 + np.concatenate([[0.0], np.cumsum(inc)])
    series = unwrap(wrap_angle(true))
    assert np.allclose(np.diff(series.unwrapped), inc)
    assert np.allclose(wrap_angle(series.unwrapped), series.wrapped)


def test_unwrap_aliasing_warning():
    steps = np.full(60, 3.1)   # just under the branch cut
    with pytest.warns(AliasingWarning):
        unwrap(wrap_angle(np.cumsum(steps)))


def test_child_rng_reproducible():
    a = child_rng(42, 7).random(5)
    b = child_rng(42, 7).random(5)
    c = child_rng(42, 8).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_trajectory_requires_uniform_times():
    with pytest.raises(ValueError):
        Trajectory(times=np.array([0.0, 0.1, 0.3]), states=np.zeros((3, 2)))


def test_euler_maruyama_reproducible():
    m = model_from_key("hopf", {"D": 0.05})
    t1 = euler_maruyama(m, [1.0, 0.0], dt=1e-3, steps=2000, seed=9)
    t2 = euler_maruyama(m, [1.0, 0.0], dt=1e-3, steps=2000, seed=9)
    assert np.array_equal(t1.states, t2.states)
    t3 = euler_maruyama(m, [1.0, 0.0], dt=1e-3, steps=2000, seed=10)
    assert not np.array_equal(t1.states, t3.states)


def test_record_stride_subsamples_same_path():
    m = model_from_key("hopf", {"D": 0.05})
    full = euler_maruyama(m, [1.0, 0.0], dt=1e-3, steps=1000, seed=4,
                          record_stride=1)
    coarse = euler_maruyama(m, [1.0, 0.0], dt=1e-3, steps=1000, seed=4,
                            record_stride=10)
    sel = np.isin(np.round(full.times / 1e-3).astype(int),
                  np.round(coarse.times / 1e-3).astype(int))
    assert np.allclose(full.states[sel], coarse.states)


def test_deterministic_hopf_circle():
    m = model_from_key("hopf", {"D": 0.0})
    period = TWO_PI / 3.5
    traj = euler_maruyama(m, [1.0, 0.0], dt=1e-3,
                          steps=int(round(period / 1e-3)), seed=0)
    r = np.hypot(traj.states[:, 0], traj.states[:, 1])
    assert np.max(np.abs(r - 1.0)) < 5e-3


def test_ensemble_trajectory_seed_isolation():
    m = model_from_key("hopf", {"D": 0.02})
    small = ensemble(m, EnsembleSpec(n_traj=3, dt=1e-2, t_burn=0.5,
                                     t_end=2.0, seed=77))
    large = ensemble(m, EnsembleSpec(n_traj=5, dt=1e-2, t_burn=0.5,
                                     t_end=2.0, seed=77))
    for a, b in zip(small, large):
        assert np.array_equal(a.states, b.states)


def test_stationary_radius():
    m = model_from_key("hopf", {"D": 0.01})
    pts = stationary_states(m, 400, seed=12, t_burn=10.0, dt=1e-3)
    r = np.hypot(pts[:, 0], pts[:, 1])
    assert abs(r.mean() - 1.0) < 0.05


def test_evolve_states_shapes():
    m = model_from_key("snic", {"D": 0.05})
    x0 = stationary_states(m, 50, seed=1, t_burn=5.0, dt=1e-3)
    x1, rec, escapes = evolve_states(m, x0, dt=1e-3, steps=100, seed=2)
    assert x1.shape == x0.shape
    assert rec is None and escapes == 0
    assert not np.array_equal(x0, x1)
