"""Long-term rotation rate and phase diffusion coefficient.

Empirical estimates come from ensembles of unwrapped phase displacements;
analytic values come from the quadrature formulas for a 1D periodic SDE,

    omega_eff = 2 pi (1 - e^{V(2pi)}) / int I_+ / sqrt(D),
    D_eff     = 4 pi^2 int I_- I_+^2 / sqrt(D) / [int I_+ / sqrt(D)]^3,

with V(phi) = -int_0^phi a/D and I_+- the one-period nested integrals of
e^{+-V}.  All exponentials are handled in log space so the small-noise
regime degrades gracefully instead of overflowing.
"""

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import logsumexp

from .models import SdeModel
from .phasemaps import PhaseField, lookup_phases
from .reduction import BinStats, ReducedPhaseModel, _advance_reduced
from .simulate import (EnsembleSpec, child_rng, circular_diff, _advance,
                       _initial_states)

TWO_PI = 2.0 * np.pi
DEFAULT_MESH = 2048
MIN_TRAJ = 30


class UnderpoweredError(RuntimeError):
    """Too few trajectories for across-ensemble error bars."""


class StiffnessError(RuntimeError):
    """Diffusion coefficient too small for the quadrature formulas."""


@dataclass
class LongTermStats:
    """Effective rotation rate and phase diffusion with standard errors."""

    omega_eff: float
    D_eff: float
    stderr_omega: float
    stderr_D: float
    n_traj: int
    t_window: float
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.D_eff < 0:
            raise ValueError("negative effective diffusion")
        if self.stderr_omega < 0 or self.stderr_D < 0:
            raise ValueError("negative standard error")


def _displacement_stats(disp, t_window, meta=None):
    disp = np.asarray(disp, dtype=float)
    n = disp.size
    if n < MIN_TRAJ:
        raise UnderpoweredError("%d trajectories; need at least %d for "
                                "error bars" % (n, MIN_TRAJ))
    rates = disp / t_window
    omega = float(np.mean(rates))
    var_d = float(np.var(disp, ddof=1))
    D_eff = var_d / (2.0 * t_window)
    stderr_omega = float(np.std(rates, ddof=1) / np.sqrt(n))
    # Gaussian-displacement variance of the sample variance
    stderr_D = D_eff * np.sqrt(2.0 / (n - 1))
    return LongTermStats(omega_eff=omega, D_eff=D_eff,
                         stderr_omega=stderr_omega, stderr_D=stderr_D,
                         n_traj=n, t_window=float(t_window), meta=meta or {})


def empirical_stats(ensemble, t_window) -> LongTermStats:
    """Across-trajectory displacement statistics over the trailing window."""
    disp = np.empty(len(ensemble))
    widths = np.empty(len(ensemble))
    for j, s in enumerate(ensemble):
        t0 = s.times[-1] - t_window
        if t0 < s.times[0] - 1e-9:
            raise ValueError("series shorter than t_window")
        i0 = int(np.searchsorted(s.times, t0 - 1e-9))
        disp[j] = s.unwrapped[-1] - s.unwrapped[i0]
        widths[j] = s.times[-1] - s.times[i0]
    if np.ptp(widths) > 1e-6 * t_window:
        raise ValueError("trajectories disagree on the trailing window")
    return _displacement_stats(disp, float(widths[0]))


#  analytic formulas ---------------------------------------------------------

def _coefficient_tables(rmodel: ReducedPhaseModel, mesh):
    """a and D on the uniform quadrature mesh (nodes 0..mesh inclusive).

    Smoothed models carry their harmonic coefficients and are evaluated
    exactly; raw tables fall back to circular linear interpolation.
    """
    phi = np.arange(mesh + 1) * (TWO_PI / mesh)
    ha = rmodel.meta.get("harmonics_a")
    hd = rmodel.meta.get("harmonics_D")
    if ha is not None and hd is not None:
        a = _eval_harmonics(np.asarray(ha), phi)
        D = np.maximum(_eval_harmonics(np.asarray(hd), phi), 1e-12)
    else:
        a = rmodel.a_of(phi)
        D = rmodel.D_of(phi)
    return phi, a, D


def _eval_harmonics(c, phi):
    out = np.full_like(phi, c[0])
    order = (len(c) - 1) // 2
    for k in range(1, order + 1):
        out += c[2 * k - 1] * np.cos(k * phi) + c[2 * k] * np.sin(k * phi)
    return out


def _spectral_potential(f, h):
    """V with V' = -f on the circular mesh, V[0] = 0; nodes 0..M inclusive.

    The mean of f fixes the linear ramp; the periodic remainder integrates
    termwise in Fourier space, which keeps a constant f exact and smooth
    tables accurate to roundoff.
    """
    M = f.size - 1
    fbar = float(np.mean(f[:M]))
    F = np.fft.rfft(f[:M] - fbar)
    k = np.arange(F.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        A = np.where(k > 0, F / (1j * k), 0.0)
    P = np.fft.irfft(A, n=M)
    V = np.empty(M + 1)
    V[:M] = -(fbar * np.arange(M) * h + P - P[0])
    V[M] = -(fbar * TWO_PI)  # periodic part returns to its start
    return V


def _log_cell_integrals(V, logg, h, sign):
    """log of per-cell integrals of e^{sign*V}/sqrt(D), V linear per cell.

    h * (e^z - 1)/z on the cell's V increment makes a constant-coefficient
    model exact to roundoff.
    """
    dV = sign * np.diff(V)
    phi1 = np.where(np.abs(dV) > 1e-12,
                    np.expm1(dV) / np.where(dV == 0, 1.0, dV),
                    1.0 + 0.5 * dV)
    mx = np.maximum(logg[:-1], logg[1:])
    gmid = 0.5 * (np.exp(logg[:-1] - mx) + np.exp(logg[1:] - mx))
    return sign * V[:-1] + mx + np.log(gmid) + np.log(h * phi1)


def _log_window_sums(logcell, cont, chunk=1024):
    """logsumexp of one-period windows of extended cell integrals.

    Row i covers cells i..i+M-1 of the doubled array; the second copy of
    the circle carries the log-continuation factor cont (+-V(2pi)).
    """
    M = logcell.size
    ext = np.concatenate([logcell, logcell + cont])
    out = np.empty(M)
    for i0 in range(0, M, chunk):
        i1 = min(i0 + chunk, M)
        win = np.lib.stride_tricks.sliding_window_view(ext, M)[i0:i1]
        out[i0:i1] = logsumexp(win, axis=1)
    return out


def analytic_stats(rmodel: ReducedPhaseModel, mesh=DEFAULT_MESH) -> LongTermStats:
    """Quadrature evaluation of the effective rotation rate and diffusion.

    Inner one-period integrals use exponential-linear cells on a uniform
    mesh; outer integrals are periodic trapezoid sums.  Everything runs in
    log space, so steep potentials fail by precision loss, not overflow.
    """
    phi, a, D = _coefficient_tables(rmodel, mesh)
    if np.min(D) < 1e-8:
        raise StiffnessError("min D = %.3g too small for the quadrature "
                             "formulas" % float(np.min(D)))
    h = TWO_PI / mesh
    V = _spectral_potential(a / D, h)
    V2pi = V[-1]
    logg = -0.5 * np.log(D)
    logh = np.log(h)

    # I_+(phi_i): window integral of e^{V - V_i}, continued by e^{V2pi}
    cells_p = _log_cell_integrals(V, logg, h, +1.0)
    log_Ip = _log_window_sums(cells_p, V2pi) - V[:-1]
    # I_-(phi_i): e^{V_i} times the backward window of e^{-V}; rotating a
    # backward cell into the principal circle multiplies it by e^{V2pi}
    cells_m = _log_cell_integrals(V, logg, h, -1.0)
    log_Im = _log_window_sums(cells_m, -V2pi) + V[:-1] + V2pi

    log_S1 = logsumexp(log_Ip + logg[:-1] + logh)
    log_S2 = logsumexp(log_Im + 2.0 * log_Ip + logg[:-1] + logh)
    num = -np.expm1(V2pi)
    if not np.isfinite(num):
        raise StiffnessError("e^{V(2pi)} overflows; drift too negative")
    omega = TWO_PI * num * np.exp(-log_S1)
    D_eff = 4.0 * np.pi**2 * np.exp(log_S2 - 3.0 * log_S1)
    return LongTermStats(omega_eff=float(omega), D_eff=float(D_eff),
                         stderr_omega=0.0, stderr_D=0.0, n_traj=0,
                         t_window=np.inf, meta={"mesh": mesh})


#  streaming ensemble pipelines ----------------------------------------------

def full_phase_stats(model: SdeModel, field: PhaseField, spec: EnsembleSpec,
                     n_bins=100, block_steps=500):
    """One streamed pass over a full-model ensemble.

    Integrates spec.n_traj trajectories, maps each recorded step through the
    phase field and accumulates (i) per-trajectory unwrapped displacements
    over [t_burn, t_end] and (ii) per-bin increment statistics at the
    integration step.  Returns (LongTermStats, BinStats); the increments
    feed km_from_stats at dt = spec.dt.
    """
    x, rngs = _initial_states(model, spec)
    nb_burn = int(round(spec.t_burn / spec.dt))
    nb_main = int(round((spec.t_end - spec.t_burn) / spec.dt))
    _advance(model, x, rngs, spec.dt, nb_burn, stride=0)
    last, flagged0 = lookup_phases(field, x[:, :2])
    stats = BinStats(n_bins=n_bins)
    disp = np.zeros(spec.n_traj)
    n_flagged = int(np.sum(flagged0))
    n_seen = flagged0.size
    d_max = 0.0
    done = 0
    while done < nb_main:
        nb = min(block_steps, nb_main - done)
        rec, _ = _advance(model, x, rngs, spec.dt, nb, stride=1, block=nb)
        ph, fl = lookup_phases(field, rec[..., :2])  # (nb, m)
        n_flagged += int(np.sum(fl))
        n_seen += fl.size
        prev = np.concatenate([last[None, :], ph[:-1]], axis=0)
        d = circular_diff(ph, prev)
        d_max = max(d_max, float(np.max(np.abs(d))))
        b = np.minimum((prev / TWO_PI * n_bins).astype(np.int64), n_bins - 1).ravel()
        dr = d.ravel()
        stats.sums += np.bincount(b, weights=dr, minlength=n_bins)
        stats.sumsq += np.bincount(b, weights=dr * dr, minlength=n_bins)
        stats.counts += np.bincount(b, minlength=n_bins)
        disp += d.sum(axis=0)
        last = ph[-1]
        done += nb
    frac = n_flagged / n_seen
    if frac > 0.01:
        raise RuntimeError("%.1f%% of ensemble samples left the valid phase "
                           "region" % (100 * frac))
    if d_max >= np.pi - 0.1:
        warnings.warn("per-step phase increments reach %.2f; shrink dt"
                      % d_max)
    lt = _displacement_stats(disp, spec.t_end - spec.t_burn,
                             meta={"flagged_fraction": frac, "dt": spec.dt,
                                   "source": "full"})
    return lt, stats


def reduced_mc_stats(rmodel: ReducedPhaseModel, n_traj, t_window, dt, seed,
                     t_burn=5.0) -> LongTermStats:
    """Displacement statistics of the reduced SDE, no series kept."""
    rngs = [child_rng(seed, j) for j in range(n_traj)]
    phi = np.array([TWO_PI * r.uniform() for r in rngs])
    nb_burn = int(round(t_burn / dt))
    nb_main = int(round(t_window / dt))
    if nb_burn:
        _advance_reduced(rmodel, phi, rngs, dt, nb_burn)
    start = phi.copy()
    _advance_reduced(rmodel, phi, rngs, dt, nb_main)
    return _displacement_stats(phi - start, nb_main * dt,
                               meta={"dt": dt, "source": "reduced_mc"})


def stats_table_csv(path, rows):
    """rows: (model, regime, D, source, LongTermStats)."""
    with open(path, "w") as f:
        f.write("model,regime,D,source,omega_eff,D_eff,stderr_omega,stderr_D\n")
        for model, regime, D, source, st in rows:
            f.write("%s,%s,%g,%s,%.10g,%.10g,%.3g,%.3g\n"
                    % (model, regime, D, source, st.omega_eff, st.D_eff,
                       st.stderr_omega, st.stderr_D))
