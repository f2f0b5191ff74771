"""Generator EDMD: least-squares approximation of the backward operator in a
polynomial dictionary, for models too high-dimensional to grid.

The generator's action on each basis function is evaluated analytically from
the model's drift and diffusion at sampled states, so only the projection
onto the dictionary is approximated.  The slowest complex mode of the fitted
matrix plays the role the grid eigenfunction plays in two dimensions: its
argument is the asymptotic phase, its coefficient expansion differentiates
exactly.
"""

import hashlib
import json
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .models import SdeModel, diffusion_tensor
from .reduction import TWO_PI
from .simulate import PhaseSeries, Trajectory, unwrap

AMP_FLOOR_FRACTION = 1e-3


class IllConditionedBasisError(RuntimeError):
    """Regularized Gram matrix still numerically singular."""


class OutOfRegionError(ValueError):
    """Evaluation point outside the fitted region."""


class DegenerateRegionError(RuntimeError):
    """Sample support too small to define an oscillation region."""


@dataclass(frozen=True)
class BasisLibrary:
    """Monomials in affinely normalized coordinates z = (x - center)/scale.

    exponents: (k, n) integer array, one row per basis function; the
    constant function is row 0.  Values, gradients and generator actions
    are evaluated from shared per-axis power tables.
    """

    exponents: np.ndarray
    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.exponents.shape[0] < self.n_dims + 2:
            raise ValueError("basis too small; need at least n + 2 functions")
        if not np.all(self.exponents[0] == 0):
            raise ValueError("row 0 must be the constant function")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")

    @property
    def k(self):
        return self.exponents.shape[0]

    @property
    def n_dims(self):
        return self.exponents.shape[1]

    @classmethod
    def monomials(cls, degree, center, scale):
        """All monomials of total degree <= degree, constant first."""
        center = np.asarray(center, dtype=float)
        scale = np.asarray(scale, dtype=float)
        n = center.size
        rows = []

        def rec(prefix, remaining):
            if len(prefix) == n:
                rows.append(tuple(prefix))
                return
            for d in range(remaining + 1):
                rec(prefix + [d], remaining - d)

        rec([], degree)
        rows.sort(key=lambda e: (sum(e), e))
        return cls(exponents=np.array(rows, dtype=np.int64), center=center,
                   scale=scale)

    def normalize(self, X):
        return (np.asarray(X, dtype=float) - self.center) / self.scale

    def _power_tables(self, Z):
        maxd = int(self.exponents.max())
        m = Z.shape[0]
        P = np.empty((self.n_dims, maxd + 1, m))
        P[:, 0] = 1.0
        for d in range(1, maxd + 1):
            P[:, d] = P[:, d - 1] * Z.T
        return P

    def values(self, X):
        """F_j(x_l): (k, m)."""
        Z = self.normalize(np.atleast_2d(X))
        P = self._power_tables(Z)
        out = np.ones((self.k, Z.shape[0]))
        for i in range(self.n_dims):
            out *= P[i, self.exponents[:, i]]
        return out

    def value_grad_hess(self, x):
        """Value, gradient and Hessian of every basis function at one point."""
        x = np.asarray(x, dtype=float)
        z = (x - self.center) / self.scale
        e = self.exponents
        maxd = int(e.max())
        pw = np.vstack([z[None, :] ** d for d in range(maxd + 2)])  # (maxd+2, n)

        def mono(shift):
            ee = e + shift[None, :]
            ok = np.all(ee >= 0, axis=1)
            out = np.zeros(self.k)
            out[ok] = np.prod(pw[ee[ok], np.arange(self.n_dims)[None, :]], axis=1)
            return out

        val = mono(np.zeros(self.n_dims, dtype=np.int64))
        grad = np.zeros((self.k, self.n_dims))
        hess = np.zeros((self.k, self.n_dims, self.n_dims))
        eye = np.eye(self.n_dims, dtype=np.int64)
        for i in range(self.n_dims):
            grad[:, i] = e[:, i] / self.scale[i] * mono(-eye[i])
            hess[:, i, i] = (e[:, i] * (e[:, i] - 1) / self.scale[i] ** 2
                             * mono(-2 * eye[i]))
            for j in range(i):
                hess[:, i, j] = hess[:, j, i] = (
                    e[:, i] * e[:, j] / (self.scale[i] * self.scale[j])
                    * mono(-eye[i] - eye[j]))
        return val, grad, hess

    def derivative_check(self, points, h=1e-5, tol=1e-6):
        """Max relative error of analytic gradients against central differences."""
        worst = 0.0
        for x in np.atleast_2d(points):
            _, grad, _ = self.value_grad_hess(x)
            for i in range(self.n_dims):
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd = (self.values(xp[None])[:, 0] - self.values(xm[None])[:, 0]) / (2 * h)
                scale = np.maximum(np.abs(grad[:, i]), 1.0)
                worst = max(worst, float(np.max(np.abs(fd - grad[:, i]) / scale)))
        if worst > tol:
            raise AssertionError("gradient check failed: %.2e" % worst)
        return worst


@dataclass(frozen=True)
class Region:
    """Occupancy lattice over the sampled bounding box."""

    box: np.ndarray          # (n, 2)
    counts: np.ndarray       # lattice occupancy counts
    occupied: np.ndarray     # bool lattice
    threshold: float

    @property
    def n_dims(self):
        return self.box.shape[0]

    def cell_index(self, X):
        X = np.atleast_2d(X)
        lo = self.box[:, 0]
        hi = self.box[:, 1]
        shape = np.array(self.counts.shape)
        frac = (X - lo) / (hi - lo)
        inside = np.all((frac >= 0) & (frac <= 1), axis=-1)
        idx = np.clip((frac * shape).astype(np.int64), 0, shape - 1)
        return idx, inside

    def contains(self, X):
        idx, inside = self.cell_index(X)
        hit = self.occupied[tuple(idx.T)]
        return hit & inside

    def occupied_centers(self):
        shape = np.array(self.counts.shape)
        lo = self.box[:, 0]
        w = (self.box[:, 1] - lo) / shape
        idx = np.argwhere(self.occupied)
        return lo + (idx + 0.5) * w

    def project(self, X):
        """Snap points outside the region to the nearest occupied cell center."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ok = self.contains(X)
        out = X.copy()
        if not np.all(ok):
            tree = cKDTree(self.occupied_centers())
            _, nearest = tree.query(X[~ok])
            out[~ok] = self.occupied_centers()[nearest]
        return out, ~ok

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.box).tobytes())
        h.update(np.packbits(self.occupied.ravel()).tobytes())
        return h.hexdigest()[:16]


def region_select(traj: Trajectory, pad=0.05, lattice=32,
                  threshold=None) -> Region:
    """Occupancy region of a long stationary trajectory.

    Cells of a coarse lattice visited more than `threshold` times form the
    region; threshold 0 keeps the whole bounding box.  The default, 1e-5 of
    the sample count, trims stray excursions while keeping the flagged
    fraction of a fresh trajectory well under a percent.
    """
    X = traj.states
    if X.shape[0] < 100000:
        raise ValueError("need at least 1e5 samples; got %d" % X.shape[0])
    if threshold is None:
        threshold = 1e-5 * X.shape[0]
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    lo = lo - pad * span
    hi = hi + pad * span
    box = np.column_stack([lo, hi])
    edges = [np.linspace(lo[i], hi[i], lattice + 1) for i in range(X.shape[1])]
    counts, _ = np.histogramdd(X, bins=edges)
    occupied = counts > threshold if threshold > 0 else np.ones_like(counts, bool)
    n_occ = int(occupied.sum())
    if n_occ < 2:
        raise DegenerateRegionError("occupancy collapsed to %d cells" % n_occ)
    labels, n_comp = ndimage.label(occupied)
    if n_comp > 1:
        sizes = ndimage.sum_labels(occupied, labels, np.arange(1, n_comp + 1))
        if sizes.max() < 0.9 * n_occ:
            warnings.warn("occupancy region fragmented: dominant component "
                          "holds %.0f%% of cells" % (100 * sizes.max() / n_occ))
    return Region(box=box, counts=counts, occupied=occupied,
                  threshold=float(threshold))


def apply_generator(model: SdeModel, basis: BasisLibrary, samples):
    """dF[j, l] = f(x_l) . grad F_j + G(x_l) : hess F_j, evaluated per sample.

    Gradients and Hessians come from the monomial power tables; diffusion
    entries that vanish identically over the sample set are skipped.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    m, n = X.shape
    f = model.drift(X)
    G = diffusion_tensor(model, X)
    Z = basis.normalize(X)
    P = basis._power_tables(Z)
    e = basis.exponents
    k = basis.k

    def table(i, shift):
        d = e[:, i] + shift
        ok = d >= 0
        out = np.zeros((k, m))
        out[ok] = P[i, d[ok]]
        return out

    dF = np.zeros((k, m))
    base = [P[i, e[:, i]] for i in range(n)]
    for i in range(n):
        others = np.ones((k, m))
        for p in range(n):
            if p != i:
                others *= base[p]
        grad_i = (e[:, i, None] / basis.scale[i]) * table(i, -1) * others
        dF += f[:, i][None, :] * grad_i
        if np.any(G[:, i, i] != 0):
            hii = (e[:, i, None] * (e[:, i, None] - 1) / basis.scale[i] ** 2
                   * table(i, -2) * others)
            dF += G[:, i, i][None, :] * hii
        for j in range(i):
            if not np.any(G[:, i, j] != 0):
                continue
            rest = np.ones((k, m))
            for p in range(n):
                if p != i and p != j:
                    rest *= base[p]
            hij = (e[:, i, None] * e[:, j, None]
                   / (basis.scale[i] * basis.scale[j])
                   * table(i, -1) * table(j, -1) * rest)
            dF += 2.0 * G[:, i, j][None, :] * hij
    return dF


def fit_generator(F_X, dF, ridge=1e-8):
    """Ridge least squares for L with L F_X ~ dF; returns (L, info)."""
    k, m = F_X.shape
    if m < 10 * k:
        raise ValueError("need at least %d samples for %d basis functions"
                         % (10 * k, k))
    Gram = F_X @ F_X.T
    delta = ridge * np.trace(Gram) / k
    A = Gram + delta * np.eye(k)
    cond = float(np.linalg.cond(A))
    if cond > 1e12:
        raise IllConditionedBasisError("regularized Gram condition %.2e" % cond)
    L = np.linalg.solve(A, F_X @ dF.T).T
    resid = float(np.linalg.norm(L @ F_X - dF) / max(np.linalg.norm(dF), 1e-300))
    return L, {"cond": cond, "ridge": float(delta), "residual": resid}


@dataclass
class GedmdModel:
    """Fitted generator matrix with its slowest complex mode."""

    basis: BasisLibrary
    L: np.ndarray
    eigenvalues: np.ndarray
    v: np.ndarray            # coefficients of the slow mode in the basis
    lam1: complex
    region: Region
    amp_floor: float
    x_ref: np.ndarray = None
    phase_offset: float = 0.0
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        const_row = float(np.max(np.abs(self.L[0])))
        scale = float(np.max(np.abs(self.L))) or 1.0
        if const_row > 1e-8 * scale:
            raise ValueError("generator does not annihilate constants: %.2e"
                             % const_row)
        if self.lam1.imag <= 0:
            raise ValueError("slow mode selected with nonpositive frequency")

    def mode_values(self, X):
        """Q(x) = sum_i v_i F_i(x) at points (..., n)."""
        X2 = np.atleast_2d(np.asarray(X, dtype=float))
        return (self.v @ self.basis.values(X2)).reshape(np.shape(X)[:-1])

    def to_json(self, path):
        payload = {
            "exponents": self.basis.exponents.tolist(),
            "center": self.basis.center.tolist(),
            "scale": self.basis.scale.tolist(),
            "L": [self.L.real.tolist()],
            "v_re": self.v.real.tolist(),
            "v_im": self.v.imag.tolist(),
            "lam1": [self.lam1.real, self.lam1.imag],
            "eigenvalues": [[z.real, z.imag] for z in self.eigenvalues],
            "region_digest": self.region.digest(),
            "region_box": self.region.box.tolist(),
            "amp_floor": self.amp_floor,
            "phase_offset": self.phase_offset,
            "x_ref": None if self.x_ref is None else self.x_ref.tolist(),
            "meta": {k: v for k, v in self.meta.items()
                     if isinstance(v, (int, float, str))},
        }
        with open(path, "w") as f:
            json.dump(payload, f)


def _pencil_modes(F_X, dF, rcond=1e-8):
    """Spectrum of the generator restricted to data-supported directions.

    High-degree monomials are strongly collinear on a thin attractor, so
    eig of the ridge solution is dominated by unsupported directions.  The
    pencil in the left singular basis of F_X, truncated at rcond, keeps
    only directions the samples actually resolve; its real matrix yields
    conjugate-pair eigenvalues and coefficient vectors mapped back to the
    original dictionary.
    """
    U, s, Wt = np.linalg.svd(F_X, full_matrices=False)
    keep = s > rcond * s[0]
    M = (U[:, keep].T @ dF) @ Wt[keep].T / s[keep][None, :]
    lam, Vm = np.linalg.eig(M.T)
    return lam, U[:, keep] @ Vm, int(keep.sum())


def _mode_consistency(lam, vectors, basis, chunk, dt):
    """|empirical one-step multiplier - exp(lam dt)| per mode.

    The multiplier is the lag-one regression coefficient of each candidate
    eigenfunction along a contiguous trajectory chunk; modes that are fit
    artifacts decorrelate within a step and miss exp(lam dt) by order one.
    """
    Q = vectors.T @ basis.values(chunk)
    num = np.sum(Q[:, 1:] * np.conj(Q[:, :-1]), axis=1)
    den = np.sum(np.abs(Q[:, :-1]) ** 2, axis=1)
    r = num / np.where(den == 0, 1.0, den)
    return np.abs(r - np.exp(lam * dt))


def _pick_slow_mode(eigenvalues, vectors, consistency, cons_tol=0.01):
    """Largest-real dynamically consistent mode with positive frequency."""
    lam = eigenvalues
    cand = (lam.imag > 1e-12) & (consistency < cons_tol)
    if not np.any(cand):
        raise ValueError("no oscillatory mode consistent with the data")
    idx = np.flatnonzero(cand)[np.argmax(lam.real[cand])]
    return lam[idx], vectors[:, idx], float(consistency[idx])


def fit_gedmd(model: SdeModel, traj: Trajectory, degree=10, m_samples=100000,
              threshold=None, ridge=1e-8, region=None) -> GedmdModel:
    """Region, basis, generator fit and slow-mode extraction in one pass."""
    if region is None:
        region = region_select(traj, threshold=threshold)
    lo, hi = region.box[:, 0], region.box[:, 1]
    basis = BasisLibrary.monomials(degree, center=0.5 * (lo + hi),
                                   scale=0.5 * (hi - lo))
    stride = max(1, traj.states.shape[0] // m_samples)
    X = traj.states[::stride][:m_samples]
    inside = region.contains(X)
    X = X[inside]
    if X.shape[0] < 10 * basis.k:
        raise ValueError("only %d in-region samples for %d basis functions"
                         % (X.shape[0], basis.k))
    F_X = basis.values(X)
    dF = apply_generator(model, basis, X)
    L, info = fit_generator(F_X, dF, ridge=ridge)
    lam, V, rank = _pencil_modes(F_X, dF)
    n_chunk = min(40000, traj.states.shape[0] // 4)
    cons = _mode_consistency(lam, V, basis, traj.states[-n_chunk:], traj.dt)
    lam1, v, c1 = _pick_slow_mode(lam, V, cons)
    if lam1.real > 1e-3 * lam1.imag:
        warnings.warn("slow mode has positive real part %.3e; fit is "
                      "untrustworthy" % lam1.real)
    q_train = v @ F_X
    v = v / np.sqrt(np.mean(np.abs(q_train) ** 2))
    q_train = v @ F_X
    amp_floor = AMP_FLOOR_FRACTION * float(np.max(np.abs(q_train)))
    g = GedmdModel(basis=basis, L=L, eigenvalues=lam, v=v, lam1=complex(lam1),
                   region=region, amp_floor=amp_floor,
                   meta={**info, "n_samples": int(X.shape[0]),
                         "degree": int(degree), "stride": int(stride),
                         "rank": rank, "consistency": c1})
    _orient_with_trajectory(g, traj)
    return g


def _orient_with_trajectory(g: GedmdModel, traj: Trajectory, n_check=2000):
    """Flip to the conjugate mode if phase retreats along the flow."""
    X = traj.states[-n_check:]
    q = g.mode_values(X)
    ph = np.angle(q)
    d = np.angle(np.exp(1j * np.diff(ph)))
    if np.median(d) < 0:
        # phase retreats along the flow; the conjugate mode rotates forward.
        # lam1 keeps its positive frequency so the unperturbed drift 2 pi / T
        # stays positive.
        g.v = np.conj(g.v)
    amp = np.abs(g.mode_values(X))
    g.x_ref = X[int(np.argmax(amp))].copy()
    g.phase_offset = -float(np.angle(g.mode_values(g.x_ref[None])[0]))


def gedmd_phase(g: GedmdModel, x):
    """(wrapped phase, amplitude) at one in-region point."""
    x = np.asarray(x, dtype=float)
    if not g.region.contains(x[None])[0]:
        raise OutOfRegionError("point outside the fitted region")
    q = (g.v @ g.basis.values(x[None]))[0]
    amp = abs(q)
    if amp < g.amp_floor:
        return np.nan, amp
    return float(np.mod(np.angle(q) + g.phase_offset, TWO_PI)), amp


def gedmd_phase_bulk(g: GedmdModel, X):
    """Phases for many points with projection of out-of-region samples.

    Returns (phases, flagged); flagged marks projected points and
    amplitudes under the floor.
    """
    shape = np.shape(X)[:-1]
    pts = np.asarray(X, dtype=float).reshape(-1, np.shape(X)[-1])
    proj, moved = g.region.project(pts)
    q = g.v @ g.basis.values(proj)
    amp = np.abs(q)
    low = amp < g.amp_floor
    ph = np.mod(np.angle(q) + g.phase_offset, TWO_PI)
    return ph.reshape(shape), (moved | low).reshape(shape)


def gedmd_phase_series(g: GedmdModel, traj: Trajectory) -> PhaseSeries:
    """Phase of the slow mode along a trajectory, wrapped and unwrapped."""
    ph, flagged = gedmd_phase_bulk(g, traj.states)
    frac = float(np.mean(flagged))
    if frac > 0.01:
        raise RuntimeError("%.1f%% of samples left the fitted region" %
                           (100 * frac))
    series = unwrap(ph, times=traj.times)
    series.meta = {"flagged_fraction": frac}
    return series


def gedmd_response_curve(g: GedmdModel, ensemble, n_bins=50):
    """Trajectory average of the phase gradient, binned by concurrent phase.

    The high-dimensional counterpart of the grid response curves: gradient
    and phase both come from the coefficient expansion, and stderr from
    the scatter of per-trajectory bin means.
    """
    from .response import (MIN_TRAJ, ResponseCurve, UnderpoweredError,
                           _phase_bins)
    from .reduction import bin_centers

    if len(ensemble) < MIN_TRAJ:
        raise UnderpoweredError("%d trajectories; need at least %d"
                                % (len(ensemble), MIN_TRAJ))
    nc = g.basis.n_dims
    per_sum = np.zeros((len(ensemble), n_bins, nc))
    per_cnt = np.zeros((len(ensemble), n_bins))
    for j, traj in enumerate(ensemble):
        ph, flagged = gedmd_phase_bulk(g, traj.states)
        gv, ok = gedmd_phase_gradient(g, traj.states)
        keep = ok & ~flagged
        b = _phase_bins(ph[keep], n_bins)
        per_cnt[j] = np.bincount(b, minlength=n_bins)
        for c in range(nc):
            per_sum[j, :, c] = np.bincount(b, weights=gv[keep, c],
                                           minlength=n_bins)
    tot = per_cnt.sum(axis=0)
    if np.any(tot == 0):
        from .reduction import BinHoleError
        raise BinHoleError("%d empty phase bins" % int(np.sum(tot == 0)))
    vals = per_sum.sum(axis=0) / tot[:, None]
    with np.errstate(invalid="ignore"):
        per_mean = per_sum / per_cnt[..., None]
    errs = np.empty_like(vals)
    good = per_cnt > 0
    n_eff = good.sum(axis=0)
    for c in range(nc):
        col = per_mean[..., c]
        mean = np.nansum(np.where(good, col, 0.0), axis=0) / n_eff
        var = (np.nansum(np.where(good, (col - mean[None, :]) ** 2, 0.0), axis=0)
               / np.maximum(n_eff - 1, 1))
        errs[:, c] = np.sqrt(var / n_eff)
    return ResponseCurve(phi=bin_centers(n_bins), values=vals, stderr=errs,
                         label="gedmd/trajectory",
                         meta={"n_traj": len(ensemble)})


def gedmd_pulse_experiment(model: SdeModel, g: GedmdModel, eps,
                           n_trials=100000, n_bins=50, seed=0, t_burn=10.0,
                           dt=1e-3, states=None):
    """Weak-pulse shifts of the fitted phase, binned by pre-pulse phase.

    Phases on both sides of the kick are exact evaluations of the
    coefficient expansion, so the only scatter is the genuine variation of
    the phase map across a bin.  Kicked states leaving the region or the
    amplitude floor are discarded.  Passing states reuses precomputed
    stationary draws (e.g. a decorrelated subsample of the training
    trajectory) instead of burning in a fresh ensemble.
    """
    from .response import ResponseCurve, UnderpoweredError, circular_bin_means
    from .reduction import bin_centers
    from .simulate import circular_diff, stationary_states

    eps = np.asarray(eps, dtype=float)
    amp = float(np.linalg.norm(eps))
    draw = int(round(1.25 * n_trials))
    if states is None:
        states = stationary_states(model, draw, seed=seed, t_burn=t_burn, dt=dt)
    else:
        states = np.array(states[:draw], dtype=float)
    ph0_all, fl = gedmd_phase_bulk(g, states)
    states = states[~fl][:n_trials]
    ph0 = ph0_all[~fl][:n_trials]
    if len(states) < n_trials:
        raise UnderpoweredError("only %d clean stationary draws of %d "
                                "requested" % (len(states), n_trials))
    kicked = states.copy()
    kicked[:, :eps.size] += eps[None, :]
    q1 = g.v @ g.basis.values(kicked)
    kept = g.region.contains(kicked) & (np.abs(q1) >= g.amp_floor)
    ph1 = np.mod(np.angle(q1[kept]) + g.phase_offset, TWO_PI)
    shifts = circular_diff(ph1, ph0[kept])
    mean, err, cnt = circular_bin_means(ph0[kept], shifts, n_bins)
    scale = amp if amp > 0 else 1.0
    return ResponseCurve(phi=bin_centers(n_bins), values=mean[:, None] / scale,
                         stderr=np.where(np.isinf(err), np.inf, err)[:, None] / scale,
                         label="gedmd/pulse",
                         meta={"eps": eps.tolist(), "n_trials": int(n_trials),
                               "discarded": int(np.sum(~kept)),
                               "redrawn": int(np.sum(fl))})


def gedmd_phase_gradient(g: GedmdModel, X):
    """Phase gradient via the coefficient expansion of the slow mode.

    Returns (gradients (..., n), valid); entries with amplitude under the
    floor are NaN and invalid.
    """
    shape = np.shape(X)[:-1]
    n = np.shape(X)[-1]
    pts = np.asarray(X, dtype=float).reshape(-1, n)
    e = g.basis.exponents
    Z = g.basis.normalize(pts)
    P = g.basis._power_tables(Z)
    base = [P[i, e[:, i]] for i in range(n)]
    q = g.v @ g.basis.values(pts)
    grads = np.empty((pts.shape[0], n))
    for i in range(n):
        others = np.ones((g.basis.k, pts.shape[0]))
        for p in range(n):
            if p != i:
                others *= base[p]
        d = e[:, i] - 1
        ok = d >= 0
        ti = np.zeros_like(others)
        ti[ok] = P[i, d[ok]]
        gFi = (e[:, i, None] / g.basis.scale[i]) * ti * others
        dq = g.v @ gFi
        grads[:, i] = (q.real * dq.imag - q.imag * dq.real)
    amp2 = np.abs(q) ** 2
    valid = np.abs(q) >= g.amp_floor
    grads[valid] /= amp2[valid, None]
    grads[~valid] = np.nan
    return grads.reshape(shape + (n,)), valid.reshape(shape)
