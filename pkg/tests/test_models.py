"""Model registry and vector-field oracles."""

import numpy as np
import pytest

from stochphase.models import (HopfParams, MorrisLecarParams, SdeModel,
                               SingularPointError, deterministic_hopf_phase,
                               diffusion_tensor, model_from_key)


def test_hopf_drift_on_cycle():
    m = model_from_key("hopf", {"D": 0.0})
    f = m.drift(np.array([1.0, 0.0]))
    # on the unit cycle the rotation rate is gamma - beta
    assert np.allclose(f, [0.0, 3.5], atol=1e-14)


def test_hopf_isotropic_diffusion():
    m = model_from_key("hopf", {"D": 0.01})
    g = m.diffusion(np.array([0.3, -1.2]))
    assert np.allclose(g, np.sqrt(0.02) * np.eye(2))
    G = diffusion_tensor(m, np.array([0.3, -1.2]))
    assert np.allclose(G, 0.01 * np.eye(2))


def test_snic_drift_point():
    # at (0,1) the angular speed is m - sin(pi/2) = m - 1, directed along -x
    m = model_from_key("snic", {"n": 1.0, "m": 1.03, "D": 0.0})
    f = m.drift(np.array([0.0, 1.0]))
    assert np.allclose(f, [-0.03, 0.0], atol=1e-14)


def test_snic_invariant_circle():
    m = model_from_key("snic", {"n": 1.0, "m": 0.999, "D": 0.0})
    ang = np.linspace(0, 2 * np.pi, 50, endpoint=False)
    pts = np.column_stack([np.cos(ang), np.sin(ang)])
    f = m.drift(pts)
    radial = np.sum(f * pts, axis=1)
    assert np.max(np.abs(radial)) < 1e-13


def test_drift_batch_shapes():
    for key in ("hopf", "snic", "ml3d"):
        m = model_from_key(key)
        x = np.zeros((4, 3, m.dim)) + 0.1
        assert m.drift(x).shape == (4, 3, m.dim)
        assert m.diffusion(x).shape == (4, 3, m.dim, m.noise_dim)


def test_ml_gating_midpoint():
    p = MorrisLecarParams()
    m = model_from_key("ml3d")
    # m_inf(beta_m) = 0.5 enters the drift through g_fast * m_inf * (V - E_Na)
    V = p.beta_m
    x = np.array([V, 0.0, 0.0])
    f = m.drift(x)
    expected_IV = (p.I_ext - p.g_fast * 0.5 * (V - p.E_Na)
                   - p.g_L * (V - p.E_L)) / p.C
    assert np.isclose(f[0], expected_IV, rtol=1e-12)


def test_ml_diffusion_voltage_only():
    m = model_from_key("ml3d", {"D": 20.0})
    G = diffusion_tensor(m, np.array([-20.0, 0.2, 0.2]))
    assert np.isclose(G[0, 0], 20.0 / MorrisLecarParams().C)
    mask = np.ones((3, 3), dtype=bool)
    mask[0, 0] = False
    assert np.all(G[mask] == 0.0)


def test_diffusion_tensor_psd():
    rng = np.random.default_rng(0)
    for key in ("hopf", "snic", "ml3d"):
        m = model_from_key(key)
        lo, hi = m.domain_hint[:, 0], m.domain_hint[:, 1]
        x = lo + (hi - lo) * rng.random((20, m.dim))
        G = diffusion_tensor(m, x)
        assert np.all(np.linalg.eigvalsh(G) >= -1e-14)


def test_unknown_keys_rejected():
    with pytest.raises(KeyError):
        model_from_key("vdp")
    with pytest.raises(KeyError):
        model_from_key("hopf", {"mu": 1.0})


def test_param_validation():
    with pytest.raises(ValueError):
        model_from_key("hopf", {"kappa": -1.0})
    with pytest.raises(ValueError):
        model_from_key("snic", {"D": -0.1})


def test_domain_hint_validation():
    with pytest.raises(ValueError):
        SdeModel(name="bad", dim=2, noise_dim=1,
                 drift=lambda x: x, diffusion=lambda x: x[..., None],
                 domain_hint=np.array([[1.0, -1.0], [0.0, 1.0]]))


def test_deterministic_hopf_phase_twist():
    p = HopfParams(delta=1.0, beta=0.5, gamma=4.0, kappa=1.0, D=0.0)
    th = deterministic_hopf_phase(np.array([2.0, 0.0]), p)
    assert np.isclose(th, (-0.5 * np.log(2.0)) % (2 * np.pi), rtol=1e-12)
    with pytest.raises(SingularPointError):
        deterministic_hopf_phase(np.zeros(2), p)
