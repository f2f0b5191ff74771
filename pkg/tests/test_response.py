"""Response curves: binning, interpolation and the pulse protocol."""

import numpy as np
import pytest

from stochphase.phasemaps import phase_gradient, phase_lookup
from stochphase.reduction import BinHoleError, bin_centers
from stochphase.response import (
    ResponseCurve,
    aiprc_grid,
    circular_bin_means,
    predict_shift,
    pulse_experiment,
    spline_phase,
)

TWO_PI = 2.0 * np.pi


def test_circular_bin_means_exact_on_constant_shifts():
    rng = np.random.default_rng(0)
    ph = rng.uniform(0, TWO_PI, 5000)
    mean, err, cnt = circular_bin_means(ph, np.full(5000, 0.3), n_bins=10)
    np.testing.assert_allclose(mean, 0.3, atol=1e-12)
    np.testing.assert_allclose(err, 0.0, atol=1e-7)
    assert cnt.sum() == 5000


def test_circular_bin_means_empty_bin():
    ph = np.linspace(0.0, 1.0, 100)   # leaves most of the circle unsampled
    with pytest.raises(BinHoleError):
        circular_bin_means(ph, np.zeros(100), n_bins=10)


def test_circular_bin_means_low_resultant():
    rng = np.random.default_rng(1)
    ph = rng.uniform(0, TWO_PI, 2000)
    shifts = rng.uniform(-np.pi, np.pi, 2000)   # no directional signal
    mean, err, _ = circular_bin_means(ph, shifts, n_bins=4)
    assert np.all(np.isnan(mean))
    assert np.all(np.isinf(err))


def test_response_curve_validation_and_interp():
    phi = bin_centers(8)
    vals = np.column_stack([np.cos(phi), np.sin(phi)])
    curve = ResponseCurve(phi=phi, values=vals, stderr=np.zeros_like(vals),
                          label="test")
    assert curve.n_comp == 2
    out = curve.value_at(phi[3])
    assert out[0, 0] == pytest.approx(np.cos(phi[3]), abs=1e-12)
    # interpolation wraps across the 2 pi seam
    seam = curve.value_at(0.0)[0]
    expect = 0.5 * (vals[0] + vals[-1])
    np.testing.assert_allclose(seam, expect, atol=1e-12)
    with pytest.raises(ValueError):
        ResponseCurve(phi=phi, values=vals, stderr=np.zeros((3, 2)), label="bad")


def test_predict_shift_contracts_components():
    phi = bin_centers(8)
    vals = np.column_stack([np.cos(phi), np.sin(phi)])
    curve = ResponseCurve(phi=phi, values=vals, stderr=np.zeros_like(vals),
                          label="test")
    got = predict_shift(curve, phi[2], np.array([0.01, 0.0]))
    assert got == pytest.approx(0.01 * np.cos(phi[2]), abs=1e-12)
    with pytest.raises(ValueError):
        predict_shift(curve, 0.0, np.array([0.01]))


def test_spline_phase_agrees_with_bilinear(pack):
    field = pack("hopf", "above", 0.01)["psi"]
    lookup = spline_phase(field)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1.3, 1.3, size=(200, 2))
    sp = lookup(pts)
    bl = np.array([phase_lookup(field, x) for x in pts])
    d = np.angle(np.exp(1j * (sp - bl)))
    assert np.max(np.abs(d)) < 5e-3


def test_aiprc_grid_matches_hand_binned_average(pack):
    p = pack("hopf", "above", 0.01)
    grad = phase_gradient(p["pair"])
    curve = aiprc_grid(grad, p["psi"], p["P0"], n_bins=20)
    assert curve.values.shape == (20, 2)
    # recompute one bin from scratch
    grid = p["grid"]
    quad = grid.quad_weights() * p["P0"].values
    gx = grad[0].values
    sel = (grid.mask & np.isfinite(gx) & np.isfinite(grad[1].values)
           & (p["psi"].psi >= 5 * TWO_PI / 20) & (p["psi"].psi < 6 * TWO_PI / 20))
    hand = np.sum(quad[sel] * gx[sel]) / np.sum(quad[sel])
    assert curve.values[5, 0] == pytest.approx(hand, rel=1e-12)


def test_aiprc_is_sinusoidal_for_the_symmetric_oscillator(pack):
    p = pack("hopf", "above", 0.01)
    curve = aiprc_grid(phase_gradient(p["pair"]), p["psi"], p["P0"], n_bins=50)
    for c in range(2):
        y = curve.values[:, c]
        M = np.column_stack([np.ones_like(curve.phi), np.cos(curve.phi),
                             np.sin(curve.phi)])
        r = y - M @ np.linalg.lstsq(M, y, rcond=None)[0]
        ss = np.sum((y - y.mean()) ** 2)
        assert 1.0 - np.sum(r**2) / ss > 0.95


def test_pulse_experiment_zero_amplitude_is_silent(pack):
    p = pack("hopf", "above", 0.01)
    curve = pulse_experiment(p["model"], p["psi"], eps=np.zeros(2),
                             n_trials=2000, n_bins=5, seed=3, t_burn=2.0)
    np.testing.assert_allclose(curve.values, 0.0, atol=1e-12)
    assert curve.meta["n_trials"] == 2000
