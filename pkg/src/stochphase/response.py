"""Averaged infinitesimal phase response curves and pulse experiments.

The aiPRC is the isochron-conditional average of the phase gradient.  It is
estimated three ways: weighting grid cells by stationary mass, averaging
interpolated gradients along trajectories, and directly kicking stationary
states with a weak pulse and binning the circular phase shifts.
"""

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .models import SdeModel
from .operators import GridField
from .phasemaps import PhaseField, lookup_phases
from .reduction import BinHoleError, bin_centers
from .simulate import circular_diff, stationary_states

TWO_PI = 2.0 * np.pi
MIN_TRAJ = 30
MIN_RESULTANT = 0.1


class UnderpoweredError(RuntimeError):
    """Too few trajectories for across-ensemble error bars."""


@dataclass
class ResponseCurve:
    """Binned vector response: values and stderr are (n_bins, n_comp)."""

    phi: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    label: str
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.stderr = np.atleast_2d(np.asarray(self.stderr, dtype=float))
        if self.values.shape != self.stderr.shape:
            raise ValueError("values/stderr shape mismatch")
        if self.values.shape[0] != len(self.phi):
            raise ValueError("bin count mismatch")
        if np.any(self.stderr < 0):
            raise ValueError("negative stderr")

    @property
    def n_bins(self):
        return len(self.phi)

    @property
    def n_comp(self):
        return self.values.shape[1]

    def value_at(self, phi):
        """Circular linear interpolation of every component."""
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        grid = np.concatenate([self.phi, [self.phi[0] + TWO_PI]])
        out = np.empty((phi.size, self.n_comp))
        w = np.mod(phi - self.phi[0], TWO_PI) + self.phi[0]
        for c in range(self.n_comp):
            col = np.concatenate([self.values[:, c], [self.values[0, c]]])
            out[:, c] = np.interp(w, grid, col)
        return out

    def peak_magnitude(self):
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def to_csv(self, path):
        cols = [self.phi]
        header = ["phi"]
        for c in range(self.n_comp):
            cols.append(self.values[:, c])
            header.append("comp%d" % c)
        for c in range(self.n_comp):
            cols.append(self.stderr[:, c])
            header.append("stderr%d" % c)
        np.savetxt(path, np.column_stack(cols), delimiter=",",
                   header=",".join(header), comments="")


def _phase_bins(phases, n_bins):
    return np.minimum((np.asarray(phases) / TWO_PI * n_bins).astype(np.int64),
                      n_bins - 1)


def aiprc_grid(gradient, field: PhaseField, P0: GridField,
               n_bins=50) -> ResponseCurve:
    """Stationary-mass-weighted average of the phase gradient per phase bin.

    gradient: sequence of GridFields, one per state direction, NaN where
    the gradient is unreliable; those cells are excluded from the average.
    """
    grid = field.grid
    comps = [np.asarray(g.values, dtype=float) for g in gradient]
    quad = np.where(grid.mask, grid.quad_weights() * P0.values, 0.0)
    finite = grid.mask.copy()
    for g in comps:
        finite &= np.isfinite(g)
    b = _phase_bins(field.psi, n_bins)
    bs, ws = b[finite], quad[finite]
    wsum = np.bincount(bs, weights=ws, minlength=n_bins)
    if np.any(wsum <= 0):
        raise BinHoleError("%d phase bins hold no stationary mass"
                           % int(np.sum(wsum <= 0)))
    vals = np.empty((n_bins, len(comps)))
    errs = np.empty_like(vals)
    for c, g in enumerate(comps):
        gv = g[finite]
        mean = np.bincount(bs, weights=ws * gv, minlength=n_bins) / wsum
        m2 = np.bincount(bs, weights=ws * gv**2, minlength=n_bins) / wsum
        neff = wsum**2 / np.bincount(bs, weights=ws**2, minlength=n_bins)
        vals[:, c] = mean
        # weighted dispersion over the bin; a resolution proxy, not a
        # sampling error (the grid integral is deterministic)
        errs[:, c] = np.sqrt(np.maximum(m2 - mean**2, 0.0) / np.maximum(neff, 1))
    return ResponseCurve(phi=bin_centers(n_bins), values=vals, stderr=errs,
                         label="%s/grid" % field.label,
                         meta={"weights": "P0*area"})


def bilinear_fields(grid, comps, points):
    """Bilinear values of several node arrays at points (..., 2).

    Returns (values (..., n_comp), valid mask); NaN at any participating
    corner or an out-of-bounds point invalidates the sample.
    """
    pts = np.asarray(points, dtype=float)
    shape = pts.shape[:-1]
    pts = pts.reshape(-1, 2)
    inside = ((pts[:, 0] >= grid.x_min) & (pts[:, 0] <= grid.x_max)
              & (pts[:, 1] >= grid.y_min) & (pts[:, 1] <= grid.y_max))
    fi = np.clip((pts[:, 0] - grid.x_min) / grid.hx, 0, grid.nx - 1 - 1e-12)
    fj = np.clip((pts[:, 1] - grid.y_min) / grid.hy, 0, grid.ny - 1 - 1e-12)
    i0 = fi.astype(np.int64)
    j0 = fj.astype(np.int64)
    tx = fi - i0
    ty = fj - j0
    out = np.empty((pts.shape[0], len(comps)))
    valid = inside.copy()
    for c, g in enumerate(comps):
        v = (g[i0, j0] * (1 - tx) * (1 - ty) + g[i0 + 1, j0] * tx * (1 - ty)
             + g[i0, j0 + 1] * (1 - tx) * ty + g[i0 + 1, j0 + 1] * tx * ty)
        out[:, c] = v
        valid &= np.isfinite(v)
    return out.reshape(shape + (len(comps),)), valid.reshape(shape)


def aiprc_trajectory(ensemble, gradient, field: PhaseField,
                     n_bins=50) -> ResponseCurve:
    """Time average of the interpolated gradient, binned by concurrent phase.

    stderr comes from the scatter of per-trajectory bin means, so
    trajectories are the independent unit.
    """
    if len(ensemble) < MIN_TRAJ:
        raise UnderpoweredError("%d trajectories; need at least %d"
                                % (len(ensemble), MIN_TRAJ))
    grid = field.grid
    comps = [np.asarray(g.values, dtype=float) for g in gradient]
    nc = len(comps)
    per_sum = np.zeros((len(ensemble), n_bins, nc))
    per_cnt = np.zeros((len(ensemble), n_bins))
    for j, traj in enumerate(ensemble):
        pts = traj.states[:, :2]
        ph, flagged = lookup_phases(field, pts)
        gv, valid = bilinear_fields(grid, comps, pts)
        keep = valid & ~flagged
        b = _phase_bins(ph[keep], n_bins)
        per_cnt[j] = np.bincount(b, minlength=n_bins)
        for c in range(nc):
            per_sum[j, :, c] = np.bincount(b, weights=gv[keep, c],
                                           minlength=n_bins)
    tot_cnt = per_cnt.sum(axis=0)
    if np.any(tot_cnt == 0):
        raise BinHoleError("%d empty phase bins" % int(np.sum(tot_cnt == 0)))
    vals = per_sum.sum(axis=0) / tot_cnt[:, None]
    # across-trajectory scatter of the per-trajectory means
    with np.errstate(invalid="ignore"):
        per_mean = per_sum / per_cnt[..., None]
    errs = np.empty_like(vals)
    for c in range(nc):
        col = per_mean[..., c]
        good = per_cnt > 0
        n_eff = good.sum(axis=0)
        mean = np.nansum(np.where(good, col, 0.0), axis=0) / n_eff
        var = (np.nansum(np.where(good, (col - mean[None, :])**2, 0.0), axis=0)
               / np.maximum(n_eff - 1, 1))
        errs[:, c] = np.sqrt(var / n_eff)
    return ResponseCurve(phi=bin_centers(n_bins), values=vals, stderr=errs,
                         label="%s/trajectory" % field.label,
                         meta={"n_traj": len(ensemble)})


def circular_bin_means(ph, shifts, n_bins):
    """Circular mean, stderr and count of shifts in each phase bin.

    stderr is the circular standard deviation over sqrt(count); bins whose
    resultant length drops below 0.1 report NaN mean and infinite stderr.
    """
    b = _phase_bins(ph, n_bins)
    cnt = np.bincount(b, minlength=n_bins)
    if np.any(cnt == 0):
        raise BinHoleError("%d empty phase bins" % int(np.sum(cnt == 0)))
    zr = np.bincount(b, weights=np.cos(shifts), minlength=n_bins) / cnt
    zi = np.bincount(b, weights=np.sin(shifts), minlength=n_bins) / cnt
    R = np.hypot(zr, zi)
    mean = np.arctan2(zi, zr)
    with np.errstate(divide="ignore", invalid="ignore"):
        circ_std = np.sqrt(-2.0 * np.log(R))
    err = circ_std / np.sqrt(cnt)
    low = R < MIN_RESULTANT
    mean[low] = np.nan
    err[low] = np.inf
    return mean, err, cnt


def spline_phase(field: PhaseField):
    """Cubic-spline phase evaluator for sub-cell displacements.

    Pulse shifts are a fraction of a grid cell, where bilinear phase
    errors would swamp the experiment's standard errors; smooth splines of
    the companion's real and imaginary parts remove that floor.
    """
    grid = field.grid
    Q = np.nan_to_num(field.companion)
    sre = RectBivariateSpline(grid.xs, grid.ys, Q.real, kx=3, ky=3, s=0)
    sim = RectBivariateSpline(grid.xs, grid.ys, Q.imag, kx=3, ky=3, s=0)

    def phases(points):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        px = np.clip(pts[:, 0], grid.x_min, grid.x_max)
        py = np.clip(pts[:, 1], grid.y_min, grid.y_max)
        return np.mod(np.arctan2(sim.ev(px, py), sre.ev(px, py)), TWO_PI)

    return phases


def pulse_experiment(model: SdeModel, field: PhaseField, eps, n_trials=100000,
                     n_bins=50, seed=0, t_burn=10.0, dt=2e-3) -> ResponseCurve:
    """Weak-pulse phase shifts binned by the pre-pulse phase.

    Each trial displaces a stationary state by eps and records the circular
    phase difference.  Values are circular bin means divided by |eps| (the
    response per unit displacement along eps); bins whose resultant length
    drops below 0.1 report NaN with infinite stderr.
    """
    eps = np.asarray(eps, dtype=float)
    amp = float(np.linalg.norm(eps))
    grid = field.grid
    draw = int(round(1.25 * n_trials))
    states = stationary_states(model, draw, seed=seed, t_burn=t_burn, dt=dt)
    _, flagged = lookup_phases(field, states[:, :2])
    lookup = spline_phase(field)
    ok = ~flagged
    n_redrawn = int(np.sum(flagged))
    states = states[ok][:n_trials]
    if len(states) < n_trials:
        raise UnderpoweredError("only %d clean stationary draws of %d "
                                "requested" % (len(states), n_trials))
    ph0 = lookup(states[:, :2])
    if amp == 0:
        shifts = np.zeros(n_trials)
        kept = np.ones(n_trials, dtype=bool)
        ph_k = ph0
    else:
        kicked = states.copy()
        kicked[:, :eps.size] += eps[None, :]
        inside = ((kicked[:, 0] >= grid.x_min) & (kicked[:, 0] <= grid.x_max)
                  & (kicked[:, 1] >= grid.y_min) & (kicked[:, 1] <= grid.y_max))
        _, flagged1 = lookup_phases(field, kicked[:, :2])
        kept = inside & ~flagged1
        ph1 = lookup(kicked[kept][:, :2])
        shifts = circular_diff(ph1, ph0[kept])
        ph_k = ph0[kept]
    mean, err, cnt = circular_bin_means(ph_k, shifts, n_bins)
    scale = amp if amp > 0 else 1.0
    return ResponseCurve(phi=bin_centers(n_bins), values=mean[:, None] / scale,
                         stderr=np.where(np.isinf(err), np.inf, err)[:, None] / scale,
                         label="%s/pulse" % field.label,
                         meta={"eps": eps.tolist(), "n_trials": n_trials,
                               "discarded": int(np.sum(~kept)),
                               "redrawn": n_redrawn})


def predict_shift(curve: ResponseCurve, phi, eps):
    """Expected circular shift for a weak pulse eps at phase phi."""
    eps = np.asarray(eps, dtype=float)
    if eps.size != curve.n_comp:
        raise ValueError("eps has %d components, curve has %d"
                         % (eps.size, curve.n_comp))
    vals = curve.value_at(phi)
    out = vals @ eps
    return float(out[0]) if np.isscalar(phi) else out


def experiment_manifest(path, curve: ResponseCurve):
    with open(path, "w") as f:
        json.dump({"label": curve.label, **curve.meta}, f, indent=1)
