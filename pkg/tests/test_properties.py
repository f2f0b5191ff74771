"""Invariants that should hold for arbitrary inputs, not just the fixtures."""

import numpy as np
from hypothesis import given, settings, strategies as st

from stochphase.gedmd import BasisLibrary
from stochphase.reduction import ReducedPhaseModel, bin_centers, smooth_periodic
from stochphase.simulate import child_rng, circular_diff, unwrap, wrap_angle

TWO_PI = 2.0 * np.pi

angles = st.floats(-50.0, 50.0, allow_nan=False)
# stay clear of the +-pi branch point where the nearest-branch rule is fragile
increments = st.lists(st.floats(-2.7, 2.7, allow_nan=False),
                      min_size=1, max_size=120)


@given(st.lists(angles, min_size=1, max_size=50))
def test_wrap_angle_range_and_identity(phis):
    w = wrap_angle(np.array(phis))
    assert np.all((w >= 0) & (w < TWO_PI))
    np.testing.assert_allclose(np.mod(w - np.array(phis), TWO_PI) % TWO_PI,
                               0.0, atol=1e-9)


@given(angles, angles)
def test_circular_diff_is_the_nearest_branch(a, b):
    d = circular_diff(a, b)
    assert -np.pi < d <= np.pi + 1e-12
    assert abs(circular_diff(b + d, a)) < 1e-9


@given(st.floats(0, TWO_PI), increments)
def test_unwrap_recovers_increments(start, incs):
    true = start + np.concatenate([[0.0], np.cumsum(incs)])
    series = unwrap(wrap_angle(true))
    np.testing.assert_allclose(np.diff(series.unwrapped), incs, atol=1e-9)
    np.testing.assert_allclose(series.wrapped, wrap_angle(true), atol=1e-12)


@settings(max_examples=40)
@given(st.integers(0, 6), st.integers(20, 100), st.randoms(use_true_random=False))
def test_smoothing_reproduces_band_limited_tables(order, n_bins, rnd):
    phi = bin_centers(n_bins)
    a = np.full(n_bins, 2.0)
    D = np.full(n_bins, 0.1)
    for k in range(1, order + 1):
        a = a + rnd.uniform(-1, 1) * np.cos(k * phi) + rnd.uniform(-1, 1) * np.sin(k * phi)
        D = D + 0.01 * rnd.uniform(-1, 1) * np.cos(k * phi)
    m = ReducedPhaseModel(label="asymptotic", n_bins=n_bins, phi=phi, a=a,
                          D=np.maximum(D, 1e-3),
                          counts=np.full(n_bins, 10, dtype=np.int64))
    s = smooth_periodic(m, order=8)
    np.testing.assert_allclose(s.a, m.a, atol=1e-8)
    np.testing.assert_allclose(s.D, m.D, atol=1e-8)


@settings(max_examples=30)
@given(st.integers(20, 80), st.randoms(use_true_random=False))
def test_smoothing_is_a_projection(n_bins, rnd):
    phi = bin_centers(n_bins)
    a = np.array([rnd.uniform(-2, 2) for _ in range(n_bins)])
    m = ReducedPhaseModel(label="mrt", n_bins=n_bins, phi=phi, a=a,
                          D=np.full(n_bins, 0.05),
                          counts=np.full(n_bins, 10, dtype=np.int64))
    once = smooth_periodic(m, order=6)
    twice = smooth_periodic(once, order=6)
    np.testing.assert_allclose(twice.a, once.a, atol=1e-9)


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 3),
       st.lists(st.floats(-2, 2, allow_nan=False), min_size=2, max_size=2))
def test_basis_values_match_naive_monomials(degree, n_pts, point):
    b = BasisLibrary.monomials(degree, center=[0.3, -0.2], scale=[1.1, 0.9])
    X = np.tile(np.asarray(point), (n_pts, 1))
    vals = b.values(X)
    Z = (X - b.center) / b.scale
    for j, (ex, ey) in enumerate(b.exponents):
        np.testing.assert_allclose(vals[j], Z[:, 0] ** ex * Z[:, 1] ** ey,
                                   rtol=1e-10, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(0, 1000))
@settings(max_examples=50)
def test_child_rng_is_a_pure_function(seed, idx):
    a = child_rng(seed, idx).standard_normal(4)
    b = child_rng(seed, idx).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    c = child_rng(seed, idx + 1).standard_normal(4)
    assert not np.array_equal(a, c)
