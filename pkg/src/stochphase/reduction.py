"""Reduction of a stochastic oscillator to a 1D phase SDE.

Two independent estimators produce the periodic drift a(phi) and diffusion
D(phi) of d phi = a dt + sqrt(2 D) dW:

* km_estimate bins Kramers-Moyal increments of the phase along simulated
  trajectories (left-endpoint conditioning);
* grid_reduce averages the generator's action over phase level sets,
  weighting grid cells by stationary mass (the conditional eta-integral
  realized without amplitude coordinates).

Coefficients are smoothed by truncated circular-harmonic least squares and
the reduced equation is integrated by Euler-Maruyama on the unwrapped line.
"""

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from numba import njit

from .models import SdeModel
from .operators import GridField
from .phasemaps import (PhaseField, amplitude_mask, lookup_phases,
                        _complex_phase_gradient)
from .simulate import (PhaseSeries, Trajectory, EnsembleSpec, child_rng,
                       unwrap, DivergenceError)

TWO_PI = 2.0 * np.pi


class BinHoleError(RuntimeError):
    """A phase bin received no samples (or no stationary mass)."""


class UnreliableSeriesError(RuntimeError):
    """Too many lookups along the trajectory left the valid phase region."""


class AliasingOrderError(ValueError):
    """Harmonic order too high for the bin count."""


@dataclass
class BinStats:
    """Mergeable per-bin increment statistics."""

    n_bins: int
    sums: np.ndarray = None
    sumsq: np.ndarray = None
    counts: np.ndarray = None

    def __post_init__(self):
        if self.sums is None:
            self.sums = np.zeros(self.n_bins)
            self.sumsq = np.zeros(self.n_bins)
            self.counts = np.zeros(self.n_bins, dtype=np.int64)

    def add_series(self, wrapped, unwrapped):
        """Accumulate increments conditioned on the left-endpoint bin."""
        d = np.diff(unwrapped)
        b = np.minimum((wrapped[:-1] / TWO_PI * self.n_bins).astype(np.int64),
                       self.n_bins - 1)
        np.add.at(self.sums, b, d)
        np.add.at(self.sumsq, b, d * d)
        np.add.at(self.counts, b, 1)

    def merge(self, other):
        if other.n_bins != self.n_bins:
            raise ValueError("bin count mismatch")
        self.sums += other.sums
        self.sumsq += other.sumsq
        self.counts += other.counts
        return self

    @property
    def total_displacement(self):
        return float(self.sums.sum())

    @property
    def total_count(self):
        return int(self.counts.sum())


@dataclass
class ReducedPhaseModel:
    """Periodic drift and diffusion tables of the reduced phase equation."""

    label: str
    n_bins: int
    phi: np.ndarray
    a: np.ndarray
    D: np.ndarray
    counts: np.ndarray
    smoothing: int = 0
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.label not in ("asymptotic", "mrt"):
            raise ValueError("label must be 'asymptotic' or 'mrt'")
        for arr in (self.phi, self.a, self.D, self.counts):
            if len(arr) != self.n_bins:
                raise ValueError("table length mismatch")
        if np.any(self.D < 0):
            raise ValueError("negative diffusion bin")
        if np.any(self.counts <= 0):
            raise BinHoleError("empty phase bin; use fewer bins or more data")

    def interpolators(self):
        """Wrap-around linear interpolation tables (phi grid, a, D)."""
        phi_ext = np.concatenate([self.phi, [self.phi[0] + TWO_PI]])
        a_ext = np.concatenate([self.a, [self.a[0]]])
        d_ext = np.concatenate([self.D, [self.D[0]]])
        return phi_ext, a_ext, d_ext

    def a_of(self, phi):
        phi_ext, a_ext, _ = self.interpolators()
        w = np.mod(np.asarray(phi) - self.phi[0], TWO_PI) + self.phi[0]
        return np.interp(w, phi_ext, a_ext)

    def D_of(self, phi):
        phi_ext, _, d_ext = self.interpolators()
        w = np.mod(np.asarray(phi) - self.phi[0], TWO_PI) + self.phi[0]
        return np.interp(w, phi_ext, d_ext)

    def to_csv(self, path, meta_path=None):
        np.savetxt(path, np.column_stack([self.phi, self.a, self.D, self.counts]),
                   delimiter=",", header="phi,a,D,count", comments="")
        if meta_path:
            with open(meta_path, "w") as f:
                json.dump({"label": self.label, "n_bins": self.n_bins,
                           "smoothing": self.smoothing,
                           **{k: v for k, v in self.meta.items()
                              if isinstance(v, (int, float, str))}}, f, indent=1)


def bin_centers(n_bins):
    return (np.arange(n_bins) + 0.5) * TWO_PI / n_bins


def full_phase_series(traj: Trajectory, field: PhaseField) -> PhaseSeries:
    """Phase of the oscillator state along one trajectory, wrapped and unwrapped."""
    phases, flagged = lookup_phases(field, traj.states[..., :2]
                                    if traj.states.shape[-1] > 2 else traj.states)
    frac = float(np.mean(flagged))
    if frac > 0.01:
        raise UnreliableSeriesError("%.1f%% of samples left the valid phase "
                                    "region" % (100 * frac))
    series = unwrap(phases, times=traj.times)
    series.meta = {"flagged_fraction": frac}
    return series


def km_from_stats(stats: BinStats, dt, label, smoothing=0, meta=None) -> ReducedPhaseModel:
    """Kramers-Moyal tables from accumulated increment statistics."""
    if np.any(stats.counts == 0):
        holes = int(np.sum(stats.counts == 0))
        raise BinHoleError("%d empty phase bins; use fewer bins or longer data"
                           % holes)
    n = stats.counts.astype(float)
    mean = stats.sums / n
    a = mean / dt
    D = (stats.sumsq / n - mean**2) / (2 * dt)
    return ReducedPhaseModel(label=label, n_bins=stats.n_bins,
                             phi=bin_centers(stats.n_bins), a=a,
                             D=np.maximum(D, 0.0), counts=stats.counts.copy(),
                             smoothing=smoothing, meta=meta or {})


def km_estimate(series_list, dt, n_bins=100, label="asymptotic") -> ReducedPhaseModel:
    """First two Kramers-Moyal coefficients of an ensemble of phase series.

    Per bin of the left-endpoint phase: a = <dPhi>/dt and
    D = <(dPhi - a dt)^2>/(2 dt).
    """
    stats = BinStats(n_bins=n_bins)
    for s in series_list:
        step = float(np.mean(np.diff(s.times)))
        if abs(step - dt) > 1e-9 * max(dt, step):
            raise ValueError("series step %.3g does not match dt %.3g" % (step, dt))
        stats.add_series(s.wrapped, s.unwrapped)
    return km_from_stats(stats, dt, label=label)


def grid_reduce(model: SdeModel, field: PhaseField, P0: GridField,
                n_bins=100) -> ReducedPhaseModel:
    """Level-set conditional averages of the generator drift and diffusion.

    Grid cells are binned by their phase value and averaged with
    stationary-mass weights; the drift integrand is omega_1 - Omega for the
    asymptotic phase and the constant 2 pi / Tbar for the MRT phase, the
    diffusion integrand is grad(Phi)^T G grad(Phi) for both.
    """
    grid = field.grid
    gpx, gpy = _complex_phase_gradient(grid, field.companion)
    f_unused, G = _grid_G(model, grid)
    quad = np.where(grid.mask, grid.quad_weights() * P0.values, 0.0)
    if field.label == "asymptotic":
        u = np.abs(field.companion)
        valid = amplitude_mask(u, grid.mask)
        lnu = np.log(np.where(valid, u, 1.0))
        dlnux, dlnuy = np.gradient(lnu, grid.hx, grid.hy, edge_order=2)
        om = 2.0 * (G[..., 0, 0] * dlnux * gpx
                    + G[..., 0, 1] * (dlnux * gpy + dlnuy * gpx)
                    + G[..., 1, 1] * dlnuy * gpy)
        omega1 = float(np.imag(field.meta["lam"]))
        integrand_a = omega1 - om
        # floored-amplitude cells and their gradient-polluted ring drop out
        grow = ~valid
        grow[1:, :] |= ~valid[:-1, :]
        grow[:-1, :] |= ~valid[1:, :]
        grow[:, 1:] |= ~valid[:, :-1]
        grow[:, :-1] |= ~valid[:, 1:]
        sel = grid.mask & ~grow
    else:
        integrand_a = np.full(field.psi.shape, TWO_PI / field.meta["tbar"])
        sel = grid.mask
    integrand_D = (G[..., 0, 0] * gpx**2 + 2 * G[..., 0, 1] * gpx * gpy
                   + G[..., 1, 1] * gpy**2)
    ang = np.where(np.isfinite(field.psi), field.psi, 0.0)   # masked cells never selected
    b = np.minimum((ang / TWO_PI * n_bins).astype(np.int64), n_bins - 1)
    wsum = np.zeros(n_bins)
    asum = np.zeros(n_bins)
    dsum = np.zeros(n_bins)
    bs, ws = b[sel], quad[sel]
    np.add.at(wsum, bs, ws)
    np.add.at(asum, bs, ws * integrand_a[sel])
    np.add.at(dsum, bs, ws * integrand_D[sel])
    if np.any(wsum <= 0):
        raise BinHoleError("%d phase bins hold no stationary mass"
                           % int(np.sum(wsum <= 0)))
    counts = np.maximum((wsum / wsum.sum() * sel.sum()).astype(np.int64), 1)
    return ReducedPhaseModel(label=field.label, n_bins=n_bins,
                             phi=bin_centers(n_bins), a=asum / wsum,
                             D=np.maximum(dsum / wsum, 0.0), counts=counts,
                             meta={"weights": "P0*area"})


def _grid_G(model, grid):
    from .operators import _fields_on_grid
    return _fields_on_grid(model, grid)


def smooth_periodic(model: ReducedPhaseModel, order=8) -> ReducedPhaseModel:
    """Truncated circular-harmonic least-squares fit of both tables."""
    if order >= model.n_bins // 2:
        raise AliasingOrderError("order %d needs at least %d bins"
                                 % (order, 2 * order + 1))
    phi = model.phi
    cols = [np.ones_like(phi)]
    for k in range(1, order + 1):
        cols.append(np.cos(k * phi))
        cols.append(np.sin(k * phi))
    M = np.column_stack(cols)
    ca = np.linalg.lstsq(M, model.a, rcond=None)[0]
    cd = np.linalg.lstsq(M, model.D, rcond=None)[0]
    meta = dict(model.meta)
    meta["harmonics_a"] = ca
    meta["harmonics_D"] = cd
    return ReducedPhaseModel(label=model.label, n_bins=model.n_bins,
                             phi=phi.copy(), a=M @ ca,
                             D=np.maximum(M @ cd, 1e-12),
                             counts=model.counts.copy(), smoothing=order,
                             meta=meta)


@njit(cache=True)
def _reduced_em_kernel(phi, a_tab, d_tab, phi0, dphi, dt, sqdt, noise, start_step,
                       stride, out):
    m = phi.shape[0]
    nsteps = noise.shape[1]
    n = a_tab.shape[0] - 1
    for j in range(m):
        p = phi[j]
        for i in range(nsteps):
            w = (p - phi0) % (TWO_PI)
            v = w / dphi
            i0 = int(v)
            if i0 > n - 1:
                i0 = n - 1
            frac = v - i0
            a = a_tab[i0] + (a_tab[i0 + 1] - a_tab[i0]) * frac
            d = d_tab[i0] + (d_tab[i0 + 1] - d_tab[i0]) * frac
            if d < 0.0:
                d = 0.0
            p = p + a * dt + np.sqrt(2.0 * d) * sqdt * noise[j, i]
            s = start_step + i + 1
            if stride > 0 and s % stride == 0:
                out[s // stride - 1, j] = p
        phi[j] = p


def _advance_reduced(rmodel: ReducedPhaseModel, phi, rngs, dt, nsteps,
                     stride=0, block=8192):
    """Advance unwrapped phases in place; optionally record every stride steps."""
    phi_ext, a_ext, d_ext = rmodel.interpolators()
    phi0 = rmodel.phi[0]
    dphi = TWO_PI / rmodel.n_bins
    m = phi.shape[0]
    n_rec = (nsteps // stride) if stride else 0
    rec = np.empty((n_rec, m)) if n_rec else np.empty((0, m))
    sqdt = np.sqrt(dt)
    done = 0
    noise = np.empty((m, min(block, nsteps)))
    while done < nsteps:
        nb = min(block, nsteps - done)
        view = noise[:, :nb]
        for j in range(m):
            rngs[j].standard_normal(out=view[j])
        _reduced_em_kernel(phi, a_ext, d_ext, phi0, dphi, dt, sqdt, view,
                           done, stride, rec)
        done += nb
        if not np.all(np.isfinite(phi)):
            bad = int(np.nonzero(~np.isfinite(phi))[0][0])
            raise DivergenceError("reduced phase diverged in trajectory %d "
                                  "by step %d" % (bad, done))
    return rec


def simulate_reduced(rmodel: ReducedPhaseModel, spec: EnsembleSpec,
                     record_stride=1):
    """Euler-Maruyama ensemble of the reduced phase SDE.

    Phases evolve on the unwrapped line with circularly interpolated
    coefficients; initial phases are uniform on the circle and the burn-in
    window is discarded.  Returns a list of PhaseSeries.
    """
    if rmodel.smoothing == 0:
        raise ValueError("smooth the reduced model before simulating")
    m = spec.n_traj
    rngs = [child_rng(spec.seed, j) for j in range(m)]
    phi = np.array([TWO_PI * r.uniform() for r in rngs])
    n_burn = int(round(spec.t_burn / spec.dt))
    n_main = int(round((spec.t_end - spec.t_burn) / spec.dt))
    if n_burn:
        _advance_reduced(rmodel, phi, rngs, spec.dt, n_burn)
    start = phi.copy()
    rec = _advance_reduced(rmodel, phi, rngs, spec.dt, n_main,
                           stride=record_stride)
    times = np.arange(rec.shape[0] + 1) * (record_stride * spec.dt)
    out = []
    for j in range(m):
        unwrapped = np.concatenate([[start[j]], rec[:, j]])
        out.append(PhaseSeries(times=times.copy(),
                               wrapped=np.mod(unwrapped, TWO_PI),
                               unwrapped=unwrapped))
    return out
