"""SDE model definitions and analytic reference quantities.

All models are Ito SDEs dX = f(X) dt + g(X) dW with state dimension n and
noise dimension k.  Drift and diffusion evaluators are vectorized: they
accept arrays of shape (..., n) and return (..., n) and (..., n, k)
respectively, so ensemble integration and operator assembly can evaluate
many points in one call.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# Radius below which the SNIC vector field (1/R terms) is not evaluated.
EPS_ORIGIN = 1e-6


class SingularPointError(ValueError):
    """Raised when a vector field is evaluated inside its singular set."""


@dataclass(frozen=True)
class SdeModel:
    """An Ito SDE dX = f(X) dt + g(X) dW.

    drift maps (..., n) -> (..., n); diffusion maps (..., n) -> (..., n, k).
    domain_hint is an (n, 2) array of [lo, hi] per axis bounding the region
    where the stationary mass lives; grids and simulations use it as the
    default box.
    """

    name: str
    dim: int
    noise_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    domain_hint: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        box = np.asarray(self.domain_hint, dtype=float)
        if box.shape != (self.dim, 2) or np.any(box[:, 1] <= box[:, 0]):
            raise ValueError("domain_hint must be a nondegenerate (n, 2) box")
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be >= 1")
        object.__setattr__(self, "domain_hint", box)


@dataclass(frozen=True)
class HopfParams:
    delta: float = 1.0
    beta: float = 0.5
    gamma: float = 4.0
    kappa: float = 1.0
    D: float = 0.01

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.D < 0:
            raise ValueError("D must be nonnegative")


@dataclass(frozen=True)
class SnicParams:
    m: float = 1.03
    n: float = 1.0
    D: float = 0.01

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("n must be positive")
        if self.D < 0:
            raise ValueError("D must be nonnegative")


@dataclass(frozen=True)
class MorrisLecarParams:
    # Gating curves x_inf(V) = 0.5*(1 + tanh((V - beta_x)/gamma_x)),
    # timescales tau_x(V) = 1/cosh((V - beta_x)/(2 gamma_x)).
    beta_m: float = -1.2      # mV
    gamma_m: float = 18.0     # mV
    beta_Y: float = -10.0     # mV
    gamma_Y: float = 10.0     # mV
    phi_Y: float = 0.15
    beta_Z: float = -21.0     # mV
    gamma_Z: float = 15.0     # mV
    phi_Z: float = 0.5
    E_Na: float = 50.0        # mV
    E_K: float = -100.0       # mV
    E_L: float = -70.0        # mV
    E_sub: float = 50.0       # mV
    g_fast: float = 20.0      # mS/cm^2
    g_Kdr: float = 20.0       # mS/cm^2
    g_sub: float = 2.0        # mS/cm^2
    g_L: float = 2.0          # mS/cm^2
    C: float = 1.0            # uF/cm^2
    I_ext: float = 29.0       # uA/cm^2
    D: float = 20.0

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("C must be positive")
        for g in (self.g_fast, self.g_Kdr, self.g_sub, self.g_L):
            if g < 0:
                raise ValueError("conductances must be nonnegative")


def _constant_isotropic_diffusion(D, dim, noise_dim=None):
    noise_dim = dim if noise_dim is None else noise_dim
    base = np.zeros((dim, noise_dim))
    base[:min(dim, noise_dim), :min(dim, noise_dim)] = np.sqrt(2.0 * D) * np.eye(min(dim, noise_dim))

    def diffusion(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(base, x.shape[:-1] + base.shape).copy()

    return diffusion


def hopf_model(p: HopfParams = HopfParams()) -> SdeModel:
    """Normal form of a supercritical Hopf bifurcation with isotropic noise.

    drift = [(delta - kappa R^2) x - (gamma - beta R^2) y,
             (gamma - beta R^2) x + (delta - kappa R^2) y],  R^2 = x^2 + y^2.
    Above bifurcation (delta > 0) the noiseless system has a limit cycle of
    radius sqrt(delta/kappa); below it a stable focus at the origin.
    """
    delta, beta, gamma, kappa = p.delta, p.beta, p.gamma, p.kappa

    def drift(x):
        x = np.asarray(x, dtype=float)
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        a = delta - kappa * r2
        w = gamma - beta * r2
        out = np.empty_like(x)
        out[..., 0] = a * x[..., 0] - w * x[..., 1]
        out[..., 1] = w * x[..., 0] + a * x[..., 1]
        return out

    return SdeModel(
        name="hopf",
        dim=2,
        noise_dim=2,
        drift=drift,
        diffusion=_constant_isotropic_diffusion(p.D, 2),
        domain_hint=np.array([[-2.5, 2.5], [-2.5, 2.5]]),
        params={"delta": delta, "beta": beta, "gamma": gamma, "kappa": kappa, "D": p.D},
    )


def snic_model(p: SnicParams = SnicParams()) -> SdeModel:
    """Saddle-node-on-invariant-circle model with isotropic noise.

    In polar form dR = R(n - R^2) dt, dtheta = (m - sin theta) dt on the
    invariant circle R = sqrt(n); above m > n the motion on the circle
    rotates, below it two fixed points (saddle and node) sit on the circle.
    The Cartesian vector field carries 1/R terms and is singular at the
    origin; evaluation inside the EPS_ORIGIN ball raises.
    """
    n, m = p.n, p.m

    def drift(x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
        if np.any(r < EPS_ORIGIN):
            raise SingularPointError(
                "SNIC drift evaluated within %.1e of the origin" % EPS_ORIGIN)
        r2 = r * r
        out = np.empty_like(x)
        out[..., 0] = n * x[..., 0] - m * x[..., 1] - x[..., 0] * r2 + x[..., 1] ** 2 / r
        out[..., 1] = m * x[..., 0] + n * x[..., 1] - x[..., 1] * r2 - x[..., 0] * x[..., 1] / r
        return out

    return SdeModel(
        name="snic",
        dim=2,
        noise_dim=2,
        drift=drift,
        diffusion=_constant_isotropic_diffusion(p.D, 2),
        domain_hint=np.array([[-2.5, 2.5], [-2.5, 2.5]]),
        params={"m": m, "n": n, "D": p.D},
    )


def _gate_inf(V, beta, gamma):
    return 0.5 * (1.0 + np.tanh((V - beta) / gamma))


def _gate_tau(V, beta, gamma):
    return 1.0 / np.cosh((V - beta) / (2.0 * gamma))


def morris_lecar_model(p: MorrisLecarParams = MorrisLecarParams(),
                       domain_hint=None) -> SdeModel:
    """3D Morris-Lecar neuron with slow K-dr and subthreshold currents.

    State (V, Y, Z); white noise of intensity sqrt(2 D / C) enters the
    voltage equation only, so the diffusion matrix is 3x1 and the noise is
    degenerate in the gating directions.
    """

    def drift(x):
        x = np.asarray(x, dtype=float)
        V, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        I_ion = (p.g_fast * _gate_inf(V, p.beta_m, p.gamma_m) * (V - p.E_Na)
                 + p.g_Kdr * Y * (V - p.E_K)
                 + p.g_sub * Z * (V - p.E_sub)
                 + p.g_L * (V - p.E_L))
        out = np.empty_like(x)
        out[..., 0] = (p.I_ext - I_ion) / p.C
        out[..., 1] = p.phi_Y * (_gate_inf(V, p.beta_Y, p.gamma_Y) - Y) / _gate_tau(V, p.beta_Y, p.gamma_Y)
        out[..., 2] = p.phi_Z * (_gate_inf(V, p.beta_Z, p.gamma_Z) - Z) / _gate_tau(V, p.beta_Z, p.gamma_Z)
        return out

    g_V = np.sqrt(2.0 * p.D / p.C)

    def diffusion(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (3, 1))
        out[..., 0, 0] = g_V
        return out

    if domain_hint is None:
        # Generous default; fit_ml_domain shrinks it to the visited set.
        domain_hint = np.array([[-75.0, 45.0], [-0.1, 0.6], [0.0, 0.6]])

    return SdeModel(
        name="ml3d",
        dim=3,
        noise_dim=1,
        drift=drift,
        diffusion=diffusion,
        domain_hint=np.asarray(domain_hint, dtype=float),
        params={"D": p.D, "C": p.C, "I_ext": p.I_ext},
    )


def diffusion_tensor(model: SdeModel, x) -> np.ndarray:
    """G(x) = (1/2) g(x) g(x)^T, symmetric positive semidefinite (..., n, n)."""
    g = model.diffusion(np.asarray(x, dtype=float))
    return 0.5 * np.einsum("...ik,...jk->...ij", g, g)


def deterministic_hopf_phase(x, p: HopfParams) -> np.ndarray:
    """Noiseless asymptotic phase of the Hopf normal form above bifurcation.

    theta(x, y) = arctan2(y, x) - (beta/kappa) log(r / R*), R* = sqrt(delta/kappa),
    wrapped to [0, 2 pi).  Valid only for delta > 0 and away from the origin.
    """
    if p.delta <= 0:
        raise ValueError("deterministic phase requires delta > 0")
    x = np.asarray(x, dtype=float)
    r = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
    if np.any(r == 0):
        raise SingularPointError("deterministic phase undefined at the origin")
    r_star = np.sqrt(p.delta / p.kappa)
    theta = np.arctan2(x[..., 1], x[..., 0]) - (p.beta / p.kappa) * np.log(r / r_star)
    return np.mod(theta, 2.0 * np.pi)


MODEL_KEYS = {"hopf": (hopf_model, HopfParams),
              "snic": (snic_model, SnicParams),
              "ml3d": (morris_lecar_model, MorrisLecarParams)}


def model_from_key(key: str, params: dict | None = None) -> SdeModel:
    """Build a registered model from its string key and a flat parameter table.

    Missing entries take the defaults above; unknown keys or parameter names
    are errors.
    """
    if key not in MODEL_KEYS:
        raise KeyError("unknown model key %r (known: %s)" % (key, sorted(MODEL_KEYS)))
    builder, param_cls = MODEL_KEYS[key]
    params = dict(params or {})
    valid = set(param_cls.__dataclass_fields__)
    unknown = set(params) - valid
    if unknown:
        raise KeyError("unknown parameters for %r: %s" % (key, sorted(unknown)))
    return builder(param_cls(**params))
