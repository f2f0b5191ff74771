"""Data-driven generator fits: basis algebra, regions, and a small planar fit."""

import numpy as np
import pytest

from stochphase import gedmd
from stochphase.gedmd import (
    BasisLibrary,
    IllConditionedBasisError,
    OutOfRegionError,
    apply_generator,
    fit_gedmd,
    fit_generator,
    region_select,
)
from stochphase.models import SdeModel, model_from_key
from stochphase.simulate import Trajectory, euler_maruyama

TWO_PI = 2.0 * np.pi


def ou_model(a=1.0, sigma=0.5):
    """Scalar linear SDE; its generator is closed on polynomials."""
    return SdeModel(name="ou", dim=1, noise_dim=1,
                    drift=lambda x: -a * np.asarray(x, dtype=float),
                    diffusion=lambda x: np.full(np.shape(x)[:-1] + (1, 1), sigma),
                    domain_hint=np.array([[-4.0, 4.0]]),
                    params={"a": a, "sigma": sigma})


def ring_trajectory(n=120000, dt=0.01, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * dt
    th = 3.5 * t
    xy = np.column_stack([np.cos(th), np.sin(th)])
    return Trajectory(times=t, states=xy + 0.05 * rng.standard_normal((n, 2)))


def test_monomial_library_layout():
    b = BasisLibrary.monomials(3, center=[0.0, 0.0], scale=[1.0, 1.0])
    assert b.k == 10                       # C(3+2, 2)
    assert np.all(b.exponents[0] == 0)
    degrees = b.exponents.sum(axis=1)
    assert np.all(np.diff(degrees) >= 0)   # sorted by total degree


def test_gradients_match_finite_differences():
    b = BasisLibrary.monomials(4, center=[0.2, -0.1], scale=[1.5, 0.7])
    pts = np.array([[0.3, 0.4], [-0.8, 1.1], [1.9, -2.0]])
    assert b.derivative_check(pts) < 1e-6


def test_hessian_by_hand():
    # F = z0^2 z1 with z = (x - c)/s
    b = BasisLibrary(exponents=np.array([[0, 0], [2, 1]]),
                     center=np.array([1.0, 2.0]), scale=np.array([2.0, 0.5]))
    x = np.array([2.0, 2.25])
    z = (x - b.center) / b.scale
    val, grad, hess = b.value_grad_hess(x)
    assert val[1] == pytest.approx(z[0] ** 2 * z[1], rel=1e-12)
    assert grad[1, 0] == pytest.approx(2 * z[0] * z[1] / 2.0, rel=1e-12)
    assert hess[1, 0, 0] == pytest.approx(2 * z[1] / 4.0, rel=1e-12)
    assert hess[1, 0, 1] == pytest.approx(2 * z[0] / (2.0 * 0.5), rel=1e-12)


def test_generator_action_on_ou_monomials():
    m = ou_model(a=1.3, sigma=0.6)
    G = 0.5 * 0.6 ** 2
    b = BasisLibrary.monomials(3, center=[0.0], scale=[1.0])
    x = np.linspace(-2, 2, 9)[:, None]
    dF = apply_generator(m, b, x)
    xs = x[:, 0]
    np.testing.assert_allclose(dF[0], 0.0, atol=1e-14)
    np.testing.assert_allclose(dF[1], -1.3 * xs, rtol=1e-12)
    np.testing.assert_allclose(dF[2], -2.6 * xs ** 2 + 2 * G, rtol=1e-12)
    np.testing.assert_allclose(dF[3], -3.9 * xs ** 3 + 6 * G * xs, rtol=1e-12)


def test_fit_recovers_closed_ou_spectrum():
    m = ou_model(a=1.0, sigma=0.5)
    rng = np.random.default_rng(11)
    x = rng.normal(0.0, np.sqrt(0.125), size=(3000, 1))   # stationary draws
    b = BasisLibrary.monomials(3, center=[0.0], scale=[1.0])
    L, info = fit_generator(b.values(x), apply_generator(m, b, x))
    assert info["residual"] < 1e-8
    lam = np.sort(np.linalg.eigvals(L).real)[::-1]
    np.testing.assert_allclose(lam, [0.0, -1.0, -2.0, -3.0], atol=1e-6)
    # constants are annihilated
    assert np.max(np.abs(L[0])) < 1e-8 * np.max(np.abs(L))


def test_fit_generator_sample_floor():
    b = BasisLibrary.monomials(3, center=[0.0], scale=[1.0])
    x = np.zeros((12, 1))
    with pytest.raises(ValueError):
        fit_generator(b.values(x), np.zeros((4, 12)))


def test_rank_deficient_dictionary_is_rejected():
    rng = np.random.default_rng(2)
    F = rng.standard_normal((5, 200))
    F[4] = F[3]                 # duplicated basis function
    with pytest.raises(IllConditionedBasisError):
        fit_generator(F, rng.standard_normal((5, 200)), ridge=1e-16)


def test_region_select_covers_the_ring():
    traj = ring_trajectory()
    reg = region_select(traj)
    th = np.linspace(0, TWO_PI, 50)
    on_ring = np.column_stack([np.cos(th), np.sin(th)])
    assert np.all(reg.contains(on_ring))
    assert not reg.contains(np.array([[0.0, 0.0]]))[0]   # hole in the middle
    proj, moved = reg.project(np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert moved[0] and not moved[1]
    assert reg.contains(proj).all()
    assert reg.digest() == region_select(traj).digest()
    assert len(reg.digest()) == 16


def test_region_needs_bulk_data():
    with pytest.raises(ValueError):
        region_select(ring_trajectory(n=5000))


@pytest.fixture(scope="module")
def hopf_fit():
    model = model_from_key("hopf", {"D": 0.01})
    traj = euler_maruyama(model, x0=np.array([1.0, 0.0]), dt=2e-3,
                          n_steps=1000000, seed=21, record_stride=2)
    return fit_gedmd(model, traj, degree=8, m_samples=100000), model, traj


def test_planar_fit_finds_the_slow_mode(hopf_fit):
    g, _, _ = hopf_fit
    lam_fd = -0.012751 + 3.499506j
    assert abs(g.lam1 - lam_fd) / abs(lam_fd) < 0.05
    assert g.meta["consistency"] < 0.01


def test_fitted_phase_evaluators(hopf_fit):
    g, _, traj = hopf_fit
    ph, amp = gedmd.gedmd_phase(g, np.array([1.0, 0.0]))
    assert np.isfinite(ph) and amp > g.amp_floor
    with pytest.raises(OutOfRegionError):
        gedmd.gedmd_phase(g, np.array([30.0, 0.0]))
    phases, flagged = gedmd.gedmd_phase_bulk(g, traj.states[:5000])
    assert np.mean(flagged) < 0.01
    series = gedmd.gedmd_phase_series(g, Trajectory(times=traj.times[:5000],
                                                    states=traj.states[:5000]))
    # increments concentrate near omega * dt
    d = np.diff(series.unwrapped)
    assert abs(np.median(d) / (2 * traj.dt) - 3.5) < 0.2


def test_fitted_phase_gradient_matches_differences(hopf_fit):
    g, _, _ = hopf_fit
    x = np.array([[0.9, 0.3]])
    grad, ok = gedmd.gedmd_phase_gradient(g, x)
    assert ok[0]
    h = 1e-6
    for i in range(2):
        xp, xm = x.copy(), x.copy()
        xp[0, i] += h
        xm[0, i] -= h
        pp, _ = gedmd.gedmd_phase_bulk(g, xp)
        pm, _ = gedmd.gedmd_phase_bulk(g, xm)
        fd = np.angle(np.exp(1j * (pp[0] - pm[0]))) / (2 * h)
        assert grad[0, i] == pytest.approx(fd, rel=1e-5, abs=1e-8)
