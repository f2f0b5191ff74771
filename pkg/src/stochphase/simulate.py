"""Euler-Maruyama integration, reproducible ensembles and circular unwrapping.

The integrator is vectorized across trajectories and consumes one
counter-derived noise stream per trajectory, so trajectory j is a function
of (seed, j) alone: results do not depend on ensemble size, execution
order or the internal blocking.  Known models (hopf, snic, ml3d) go
through numba kernels when numba is importable; anything else falls back
to a numpy stepping loop with identical semantics.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .models import SdeModel

try:
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba present in the test env
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap

    prange = range

TWO_PI = 2.0 * np.pi

# escape-fraction above which a run is flagged as leaning on the reflecting pad
ESCAPE_FLAG_FRACTION = 1e-3


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""


class AliasingWarning(UserWarning):
    """Per-step circular distance close to pi: dt too large for unwrapping."""


@dataclass
class Trajectory:
    """Uniformly sampled realization: times (T,), states (T, n)."""

    times: np.ndarray
    states: np.ndarray
    escapes: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.shape[0] != self.states.shape[0]:
            raise ValueError("times and states length mismatch")
        if self.times.size > 1:
            dts = np.diff(self.times)
            if np.any(dts <= 0) or not np.allclose(dts, dts[0], rtol=1e-9, atol=1e-12):
                raise ValueError("times must increase with a constant step")

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def to_csv(self, path):
        n = self.states.shape[1]
        header = "t," + ",".join("x%d" % i for i in range(n))
        np.savetxt(path, np.column_stack([self.times, self.states]),
                   delimiter=",", header=header, comments="")


@dataclass(frozen=True)
class EnsembleSpec:
    """How to generate an ensemble; init is a point, "uniform" or "stationary"."""

    n_traj: int
    dt: float
    t_burn: float
    t_end: float
    seed: int
    init: object = "stationary"

    def __post_init__(self):
        if not (self.t_end > self.t_burn >= 0):
            raise ValueError("need t_end > t_burn >= 0")
        if not (0 < self.dt <= self.t_end):
            raise ValueError("need 0 < dt <= t_end")
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")


@dataclass
class PhaseSeries:
    """Wrapped and unwrapped views of one phase trajectory.

    wrapped lives in [0, 2 pi); unwrapped differs from it by integer
    multiples of 2 pi chosen by the nearest-branch rule, so successive
    increments stay in (-pi, pi].
    """

    times: np.ndarray
    wrapped: np.ndarray
    unwrapped: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.wrapped = np.asarray(self.wrapped, dtype=float)
        self.unwrapped = np.asarray(self.unwrapped, dtype=float)
        if not (self.times.shape == self.wrapped.shape == self.unwrapped.shape):
            raise ValueError("times/wrapped/unwrapped shape mismatch")


def wrap_angle(phi):
    return np.mod(phi, TWO_PI)


def circular_diff(b, a):
    """Representative of b - a in (-pi, pi]."""
    return np.pi - np.mod(np.pi - (np.asarray(b) - np.asarray(a)), TWO_PI)


def unwrap(wrapped, times=None, warn_margin=0.1) -> PhaseSeries:
    """Unwrap a circular series by the nearest-branch rule.

    The stored wrapped array is the input itself; the unwrapped array adds
    the cumulative 2 pi winding.  Steps with circular distance within
    warn_margin of pi raise an AliasingWarning (dt too coarse to trust the
    branch choice).
    """
    w = np.asarray(wrapped, dtype=float)
    if times is None:
        times = np.arange(w.size, dtype=float)
    d = circular_diff(w[1:], w[:-1])
    if np.any(np.abs(d) >= np.pi - warn_margin):
        warnings.warn("circular increments close to pi; decrease the sampling step",
                      AliasingWarning)
    # integer winding counts keep unwrapped exactly w + 2*pi*k
    c = np.rint((d - np.diff(w)) / TWO_PI)
    k = np.concatenate([[0.0], np.cumsum(c)])
    return PhaseSeries(times=times, wrapped=w, unwrapped=w + TWO_PI * k)


def child_rng(seed, index):
    """Independent generator for trajectory `index` of run `seed`."""
    return np.random.Generator(
        np.random.SFC64(np.random.SeedSequence((int(seed), int(index)))))


def padded_box(model: SdeModel, pad_fraction=0.2):
    lo = model.domain_hint[:, 0]
    hi = model.domain_hint[:, 1]
    pad = pad_fraction * (hi - lo)
    return lo - pad, hi + pad


#  numba kernels for the registered models ---------------------------------
#  params layout: hopf  [delta, beta, gamma, kappa, sqrt(2D)]
#                 snic  [m, n, 0, 0, sqrt(2D)]

@njit(cache=True, parallel=True)
def _em_kernel_2d(kind, p, x, noise, dt, sqdt, lo, hi, stride, start, out):
    nsteps = noise.shape[1]
    m = x.shape[0]
    esc = 0
    for j in prange(m):
        xj = x[j, 0]
        yj = x[j, 1]
        e = 0
        for i in range(nsteps):
            r2 = xj * xj + yj * yj
            if kind == 0:
                a = p[0] - p[3] * r2
                w = p[2] - p[1] * r2
                fx = a * xj - w * yj
                fy = w * xj + a * yj
            else:
                r = np.sqrt(r2)
                fx = p[1] * xj - p[0] * yj - xj * r2 + yj * yj / r
                fy = p[0] * xj + p[1] * yj - yj * r2 - xj * yj / r
            xj = xj + fx * dt + p[4] * sqdt * noise[j, i, 0]
            yj = yj + fy * dt + p[4] * sqdt * noise[j, i, 1]
            if xj > hi[0]:
                xj = 2.0 * hi[0] - xj
                e += 1
            elif xj < lo[0]:
                xj = 2.0 * lo[0] - xj
                e += 1
            if yj > hi[1]:
                yj = 2.0 * hi[1] - yj
                e += 1
            elif yj < lo[1]:
                yj = 2.0 * lo[1] - yj
                e += 1
            s = start + i + 1
            if stride > 0 and s % stride == 0:
                out[s // stride - 1, j, 0] = xj
                out[s // stride - 1, j, 1] = yj
        x[j, 0] = xj
        x[j, 1] = yj
        esc += e
    return esc


@njit(cache=True, parallel=True)
def _em_kernel_ml(p, x, noise, dt, sqdt, lo, hi, stride, start, out):
    # p: [beta_m, gamma_m, beta_Y, gamma_Y, phi_Y, beta_Z, gamma_Z, phi_Z,
    #     E_Na, E_K, E_L, E_sub, g_fast, g_Kdr, g_sub, g_L, C, I_ext, g_V]
    nsteps = noise.shape[1]
    m = x.shape[0]
    esc = 0
    for j in prange(m):
        V = x[j, 0]
        Y = x[j, 1]
        Z = x[j, 2]
        e = 0
        for i in range(nsteps):
            m_inf = 0.5 * (1.0 + np.tanh((V - p[0]) / p[1]))
            y_inf = 0.5 * (1.0 + np.tanh((V - p[2]) / p[3]))
            z_inf = 0.5 * (1.0 + np.tanh((V - p[5]) / p[6]))
            tau_y = 1.0 / np.cosh((V - p[2]) / (2.0 * p[3]))
            tau_z = 1.0 / np.cosh((V - p[5]) / (2.0 * p[6]))
            i_ion = (p[12] * m_inf * (V - p[8]) + p[13] * Y * (V - p[9])
                     + p[14] * Z * (V - p[11]) + p[15] * (V - p[10]))
            V = V + (p[17] - i_ion) / p[16] * dt + p[18] * sqdt * noise[j, i, 0]
            Y = Y + p[4] * (y_inf - Y) / tau_y * dt
            Z = Z + p[7] * (z_inf - Z) / tau_z * dt
            if V > hi[0]:
                V = 2.0 * hi[0] - V
                e += 1
            elif V < lo[0]:
                V = 2.0 * lo[0] - V
                e += 1
            if Y > hi[1]:
                Y = 2.0 * hi[1] - Y
                e += 1
            elif Y < lo[1]:
                Y = 2.0 * lo[1] - Y
                e += 1
            if Z > hi[2]:
                Z = 2.0 * hi[2] - Z
                e += 1
            elif Z < lo[2]:
                Z = 2.0 * lo[2] - Z
                e += 1
            s = start + i + 1
            if stride > 0 and s % stride == 0:
                out[s // stride - 1, j, 0] = V
                out[s // stride - 1, j, 1] = Y
                out[s // stride - 1, j, 2] = Z
        x[j, 0] = V
        x[j, 1] = Y
        x[j, 2] = Z
        esc += e
    return esc


def _kernel_params(model: SdeModel):
    if not HAVE_NUMBA:
        return None
    q = model.params
    if model.name == "hopf":
        return 0, np.array([q["delta"], q["beta"], q["gamma"], q["kappa"],
                            np.sqrt(2.0 * q["D"])])
    if model.name == "snic":
        return 1, np.array([q["m"], q["n"], 0.0, 0.0, np.sqrt(2.0 * q["D"])])
    if model.name == "ml3d":
        return 2, None
    return None


def _ml_param_array(model: SdeModel):
    from .models import MorrisLecarParams
    p = MorrisLecarParams(D=model.params["D"], C=model.params["C"],
                          I_ext=model.params["I_ext"])
    return np.array([p.beta_m, p.gamma_m, p.beta_Y, p.gamma_Y, p.phi_Y,
                     p.beta_Z, p.gamma_Z, p.phi_Z, p.E_Na, p.E_K, p.E_L,
                     p.E_sub, p.g_fast, p.g_Kdr, p.g_sub, p.g_L, p.C,
                     p.I_ext, np.sqrt(2.0 * p.D / p.C)])


def _em_numpy_block(model, x, noise, dt, lo, hi, stride, start, out):
    """Reference stepping loop; semantics identical to the kernels."""
    sqdt = np.sqrt(dt)
    esc = 0
    for i in range(noise.shape[1]):
        g = model.diffusion(x)
        x += model.drift(x) * dt + np.einsum("mnk,mk->mn", g, noise[:, i]) * sqdt
        for d in range(x.shape[1]):
            over = x[:, d] > hi[d]
            under = x[:, d] < lo[d]
            esc += int(np.count_nonzero(over)) + int(np.count_nonzero(under))
            x[over, d] = 2.0 * hi[d] - x[over, d]
            x[under, d] = 2.0 * lo[d] - x[under, d]
        s = start + i + 1
        if stride > 0 and s % stride == 0:
            out[s // stride - 1] = x
    return esc


def _advance(model, x, rngs, dt, nsteps, stride=0, block=4096, pad_fraction=0.2):
    """Advance state rows in place, recording every stride-th step.

    x: (m, n) modified in place; rngs: one Generator per row, consumed
    sequentially.  Returns (recorded array or None, escape count).
    """
    m, n = x.shape
    k = model.noise_dim
    lo, hi = padded_box(model, pad_fraction)
    n_rec = nsteps // stride if stride > 0 else 0
    out = np.empty((n_rec, m, n)) if n_rec else np.empty((0, m, n))
    spec = _kernel_params(model)
    # keep the noise buffer near 300 MB for wide ensembles
    block = max(1, min(block, int(2e7 // max(m * k, 1)) + 1))
    escapes = 0
    done = 0
    while done < nsteps:
        b = min(block, nsteps - done)
        noise = np.empty((m, b, k))
        for j, rng in enumerate(rngs):
            rng.standard_normal(out=noise[j])
        if spec is not None and spec[0] in (0, 1):
            escapes += int(_em_kernel_2d(spec[0], spec[1], x, noise, dt,
                                         np.sqrt(dt), lo, hi, stride, done, out))
        elif spec is not None and spec[0] == 2:
            escapes += int(_em_kernel_ml(_ml_param_array(model), x, noise, dt,
                                         np.sqrt(dt), lo, hi, stride, done, out))
        else:
            escapes += _em_numpy_block(model, x, noise, dt, lo, hi, stride, done, out)
        done += b
        if not np.all(np.isfinite(x)):
            bad = int(np.where(~np.all(np.isfinite(x), axis=1))[0][0])
            raise DivergenceError(
                "non-finite state in trajectory %d by step %d" % (bad, done))
    return out if n_rec else None, escapes


def euler_maruyama(model: SdeModel, x0, dt, steps, seed, record_stride=1) -> Trajectory:
    """Integrate one trajectory; states recorded every record_stride steps.

    States escaping the 20%-padded domain_hint box are reflected at the pad
    and counted in Trajectory.escapes.
    """
    x = np.array(np.asarray(x0, dtype=float), ndmin=2).copy()
    if x.shape != (1, model.dim):
        raise ValueError("x0 must be a point of dimension %d" % model.dim)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    rec, escapes = _advance(model, x, [rng], dt, int(steps), stride=record_stride)
    n_rec = rec.shape[0] if rec is not None else 0
    times = np.arange(n_rec + 1) * (record_stride * dt)
    states = np.empty((n_rec + 1, model.dim))
    states[0] = np.asarray(x0, dtype=float)
    if n_rec:
        states[1:] = rec[:, 0, :]
    return Trajectory(times=times, states=states, escapes=escapes)


def _initial_states(model: SdeModel, spec: EnsembleSpec):
    """One initial state per trajectory, drawn before the noise stream."""
    rngs = [child_rng(spec.seed, j) for j in range(spec.n_traj)]
    init = spec.init
    if isinstance(init, str) and init in ("stationary", "uniform"):
        lo = model.domain_hint[:, 0]
        hi = model.domain_hint[:, 1]
        if init == "stationary":
            # middle-half box; burn-in carries the states to stationarity
            mid = 0.5 * (lo + hi)
            span = hi - lo
            lo = mid - 0.25 * span
            hi = mid + 0.25 * span
        x = np.empty((spec.n_traj, model.dim))
        for j, rng in enumerate(rngs):
            x[j] = lo + (hi - lo) * rng.uniform(size=model.dim)
    else:
        point = np.asarray(init, dtype=float)
        if point.shape != (model.dim,):
            raise ValueError("init point must have dimension %d" % model.dim)
        x = np.tile(point, (spec.n_traj, 1))
    return x, rngs


def ensemble(model: SdeModel, spec: EnsembleSpec, record_stride=1):
    """Generate spec.n_traj trajectories over [t_burn, t_end].

    Recording starts after the burn-in with trajectory times restarted at
    zero.  Trajectory j depends only on (spec.seed, j).
    """
    x, rngs = _initial_states(model, spec)
    steps_burn = int(round(spec.t_burn / spec.dt))
    steps_main = int(round((spec.t_end - spec.t_burn) / spec.dt))
    _, esc_burn = _advance(model, x, rngs, spec.dt, steps_burn, stride=0)
    x0 = x.copy()
    rec, escapes = _advance(model, x, rngs, spec.dt, steps_main, stride=record_stride)
    n_rec = rec.shape[0] if rec is not None else 0
    times = np.arange(n_rec + 1) * (record_stride * spec.dt)
    total_steps = (steps_burn + steps_main) * spec.n_traj
    if total_steps and (esc_burn + escapes) / total_steps > ESCAPE_FLAG_FRACTION:
        warnings.warn("escape fraction %.2e above %.0e: enlarge domain_hint"
                      % ((esc_burn + escapes) / total_steps, ESCAPE_FLAG_FRACTION))
    out = []
    for j in range(spec.n_traj):
        states = np.empty((n_rec + 1, model.dim))
        states[0] = x0[j]
        if n_rec:
            states[1:] = rec[:, j, :]
        out.append(Trajectory(times=times.copy(), states=states))
    return out


def evolve_states(model: SdeModel, states, dt, steps, seed, record_stride=0):
    """Vectorized propagation of arbitrary state rows with child seeding.

    Row j consumes the (seed, j) noise stream.  Returns (final states,
    recorded block or None, escapes); the input array is not modified.
    """
    x = np.array(states, dtype=float, copy=True)
    rngs = [child_rng(seed, j) for j in range(x.shape[0])]
    rec, escapes = _advance(model, x, rngs, dt, int(steps), stride=record_stride)
    return x, rec, escapes


def stationary_states(model: SdeModel, n, seed, t_burn=20.0, dt=1e-3):
    """n independent draws from the stationary density via ensemble burn-in."""
    spec = EnsembleSpec(n_traj=int(n), dt=dt, t_burn=0.0, t_end=t_burn,
                        seed=seed, init="stationary")
    x, rngs = _initial_states(model, spec)
    steps = int(round(t_burn / dt))
    _advance(model, x, rngs, dt, steps, stride=0)
    return x
