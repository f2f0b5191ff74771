"""Stochastic phase maps on the grid.

Two notions of phase for a noisy oscillator:

* the asymptotic phase Psi(x) = arg Q(x) of the slowest complex backward
  eigenfunction Q = u e^{i Psi}, with amplitude u and the drift correction
  Omega(x) = 2 sum_ij G_ij d_i(ln u) d_j Psi, so that the generator acts on
  Psi as omega_1 - Omega;
* the mean-return-time phase Theta(x) = (2 pi / Tbar)(T0 - T(x)), where T
  solves L+[T] = -1 with a Tbar jump across a cut ray, solved here as one
  augmented sparse system (nodal T plus the scalar Tbar).

Gradients of wrapped phases are always taken through the complex companion
field, never through the wrapped angle.
"""

import json
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .models import SdeModel, diffusion_tensor
from .operators import (Grid2D, GridField, SparseOperator, SpectralPair,
                        assemble_backward, assemble_forward, stationary_density,
                        stationary_current)

TWO_PI = 2.0 * np.pi

# phase is meaningless where the eigenfunction amplitude collapses
U_FLOOR_FRACTION = 1e-3


class BadReferenceError(ValueError):
    """Reference point sits where the phase amplitude is below floor."""


class BadCutError(RuntimeError):
    """Cut ray fails to intersect the oscillation's circulation."""


class OutOfDomainError(ValueError):
    """Point lookup outside the grid bounds or at a masked cell."""


@dataclass
class PhaseField:
    """Wrapped phase on a grid with its complex companion for interpolation.

    companion is Q for the asymptotic phase and e^{i Theta} for the MRT
    phase; psi is always arg(companion) wrapped to [0, 2pi).
    """

    grid: Grid2D
    psi: np.ndarray
    companion: np.ndarray
    label: str
    x_ref: np.ndarray
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.label not in ("asymptotic", "mrt"):
            raise ValueError("label must be 'asymptotic' or 'mrt'")
        self.psi = np.asarray(self.psi, dtype=float)
        self.companion = np.asarray(self.companion, dtype=complex)
        self.x_ref = np.asarray(self.x_ref, dtype=float)

    def to_csv(self, path):
        X, Y = self.grid.mesh()
        m = self.grid.mask
        data = np.column_stack([X[m], Y[m], self.psi[m],
                                self.companion[m].real, self.companion[m].imag])
        np.savetxt(path, data, delimiter=",", header="x,y,phase,re,im", comments="")


@dataclass
class OmegaField:
    """Drift-correction field Omega(x); NaN where the amplitude is floored."""

    grid: Grid2D
    values: np.ndarray
    omega1: float
    u_mask: np.ndarray

    def mean(self, P0: GridField):
        """Stationary average of Omega over the valid region."""
        w = self.grid.quad_weights()
        sel = self.u_mask
        return float(np.sum(w[sel] * P0.values[sel] * self.values[sel])
                     / np.sum(w[sel] * P0.values[sel]))


@dataclass(frozen=True)
class CutSpec:
    """Axis-aligned ray: from anchor along +x (0), +y (90), -x (180), -y (270)."""

    anchor: tuple
    angle_deg: int = 0

    def __post_init__(self):
        if self.angle_deg not in (0, 90, 180, 270):
            raise ValueError("cut ray must be axis-aligned")


@dataclass
class MrtSolution:
    """Mean-return-time function T, its period Tbar, and the defining cut."""

    T: GridField
    tbar: float
    orientation: int
    cut: CutSpec
    anchor_node: tuple
    backward: SparseOperator
    cut_column: np.ndarray
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if not (self.tbar > 0 and np.isfinite(self.tbar)):
            raise BadCutError("nonpositive mean period %r" % self.tbar)

    def to_json(self, path):
        payload = {"tbar": self.tbar, "orientation": self.orientation,
                   "cut_anchor": list(map(float, self.cut.anchor)),
                   "cut_angle_deg": self.cut.angle_deg,
                   "anchor_node": list(self.anchor_node),
                   "residual_max": self.meta.get("residual_max")}
        with open(path, "w") as f:
            json.dump(payload, f, indent=1)


def amplitude_mask(u_values, mask):
    floor = U_FLOOR_FRACTION * np.nanmax(np.abs(u_values))
    out = np.zeros_like(mask)
    out[mask] = np.abs(u_values[mask]) > floor
    return out


def _bilinear_complex(grid, companion, x):
    x = np.asarray(x, dtype=float)
    if not (grid.x_min <= x[0] <= grid.x_max and grid.y_min <= x[1] <= grid.y_max):
        raise OutOfDomainError("point %s outside grid bounds" % (x,))
    fi = np.clip((x[0] - grid.x_min) / grid.hx, 0, grid.nx - 1 - 1e-12)
    fj = np.clip((x[1] - grid.y_min) / grid.hy, 0, grid.ny - 1 - 1e-12)
    i, j = int(fi), int(fj)
    tx, ty = fi - i, fj - j
    c = np.nan_to_num(companion[i:i + 2, j:j + 2])
    val = (c[0, 0] * (1 - tx) * (1 - ty) + c[1, 0] * tx * (1 - ty)
           + c[0, 1] * (1 - tx) * ty + c[1, 1] * tx * ty)
    if val == 0:
        raise OutOfDomainError("lookup at %s lands on masked nodes" % (x,))
    return val


def phase_lookup(field: PhaseField, x):
    """Wrapped phase at an arbitrary point, circularly interpolated."""
    return float(np.mod(np.angle(_bilinear_complex(field.grid, field.companion, x)),
                        TWO_PI))


def lookup_phases(field: PhaseField, points):
    """Vectorized wrapped-phase lookup with masked-excursion bridging.

    points (..., 2).  Out-of-domain points are clamped to the boundary and
    lookups landing entirely on masked nodes fall back to the nearest node
    with a defined companion; both are reported in the flagged mask.
    Returns (phases, flagged) with phases in [0, 2pi).
    """
    grid = field.grid
    pts = np.asarray(points, dtype=float)
    shape = pts.shape[:-1]
    pts = pts.reshape(-1, 2)
    outside = ((pts[:, 0] < grid.x_min) | (pts[:, 0] > grid.x_max)
               | (pts[:, 1] < grid.y_min) | (pts[:, 1] > grid.y_max))
    fi = np.clip((pts[:, 0] - grid.x_min) / grid.hx, 0, grid.nx - 1 - 1e-12)
    fj = np.clip((pts[:, 1] - grid.y_min) / grid.hy, 0, grid.ny - 1 - 1e-12)
    i = fi.astype(np.int64)
    j = fj.astype(np.int64)
    tx = fi - i
    ty = fj - j
    c = np.nan_to_num(field.companion)
    val = (c[i, j] * (1 - tx) * (1 - ty) + c[i + 1, j] * tx * (1 - ty)
           + c[i, j + 1] * (1 - tx) * ty + c[i + 1, j + 1] * tx * ty)
    dead = val == 0
    if np.any(dead):
        # bridge: nearest of the four corners with a defined companion
        ii, jj = i[dead], j[dead]
        corners = np.stack([c[ii, jj], c[ii + 1, jj], c[ii, jj + 1],
                            c[ii + 1, jj + 1]])
        pick = np.argmax(np.abs(corners), axis=0)
        val[dead] = corners[pick, np.arange(ii.size)]
    phases = np.mod(np.angle(val), TWO_PI)
    flagged = outside | dead
    return phases.reshape(shape), flagged.reshape(shape)


def default_x_ref(P0: GridField, u: GridField, core=None):
    """Density-core point on the positive-x ray, at the oscillation radius.

    Taken as the node maximizing P0 * u along the ray: the amplitude factor
    pushes the reference out of the phaseless core onto the stochastic
    limit cycle (or the quasicycle ring below bifurcation).
    """
    grid = P0.grid
    if core is None:
        core = density_centroid(P0)
    j = int(np.clip(round((core[1] - grid.y_min) / grid.hy), 0, grid.ny - 1))
    xs = grid.xs
    row = np.where(grid.mask[:, j], P0.values[:, j] * np.abs(u.values[:, j]), -np.inf)
    row[xs <= core[0]] = -np.inf
    i = int(np.argmax(row))
    return np.array([xs[i], grid.ys[j]])


def density_centroid(P0: GridField):
    grid = P0.grid
    w = grid.quad_weights()
    X, Y = grid.mesh()
    m = grid.mask
    return np.array([float(np.sum(w[m] * P0.values[m] * X[m])),
                     float(np.sum(w[m] * P0.values[m] * Y[m]))])


def asymptotic_phase(pair: SpectralPair, x_ref, model: SdeModel = None,
                     P0: GridField = None):
    """Asymptotic phase Psi = arg Q and amplitude u = |Q|.

    The global rotation is fixed so Psi(x_ref) = 0.  When model and P0 are
    supplied, the orientation is checked against the stationary current at
    x_ref and the conjugate branch is taken if the phase would retreat
    along the flow.
    """
    grid = pair.Q.grid
    Q = np.array(pair.Q.values)
    u = np.abs(Q)
    umask = amplitude_mask(u, grid.mask)
    i, j = grid.nearest_node(x_ref)
    if not umask[i, j]:
        raise BadReferenceError("amplitude below floor at x_ref %s" % (x_ref,))
    if model is not None and P0 is not None:
        Jx, Jy = stationary_current(model, P0)
        gx, gy = _complex_phase_gradient(grid, Q)
        along = Jx.values[i, j] * gx[i, j] + Jy.values[i, j] * gy[i, j]
        if along < 0:
            warnings.warn("phase retreats along the stationary current; "
                          "taking the conjugate branch")
            Q = np.conj(Q)
    ref = _bilinear_complex(grid, np.where(grid.mask, Q, np.nan), x_ref)
    Q = Q * np.exp(-1j * np.angle(ref))
    psi = np.mod(np.angle(Q), TWO_PI)
    field = PhaseField(grid=grid, psi=psi, companion=Q, label="asymptotic",
                       x_ref=np.asarray(x_ref, dtype=float),
                       meta={"lam": pair.lam, "u_mask_fraction": float(umask.mean())})
    u_field = GridField(grid=grid, values=np.where(grid.mask, u, np.nan))
    return field, u_field


def _complex_phase_gradient(grid, Q):
    """grad Psi = (Re Q grad Im Q - Im Q grad Re Q) / |Q|^2, NaN-safe."""
    Qf = np.nan_to_num(Q)
    re, im = Qf.real, Qf.imag
    dre_dx, dre_dy = np.gradient(re, grid.hx, grid.hy, edge_order=2)
    dim_dx, dim_dy = np.gradient(im, grid.hx, grid.hy, edge_order=2)
    mod2 = re**2 + im**2
    with np.errstate(divide="ignore", invalid="ignore"):
        gx = (re * dim_dx - im * dre_dx) / mod2
        gy = (re * dim_dy - im * dre_dy) / mod2
    return gx, gy


def phase_gradient(pair: SpectralPair):
    """Gradient of the asymptotic phase, free of wrap artifacts.

    Returns (gx, gy) GridFields, NaN where |Q| is below the amplitude
    floor or beside a masked node.
    """
    grid = pair.Q.grid
    Q = pair.Q.values
    gx, gy = _complex_phase_gradient(grid, Q)
    good = amplitude_mask(np.abs(Q), grid.mask)
    # gradient stencils reaching a masked node are polluted
    bad = ~grid.mask
    if np.any(bad):
        grow = np.zeros_like(bad)
        grow[1:, :] |= bad[:-1, :]
        grow[:-1, :] |= bad[1:, :]
        grow[:, 1:] |= bad[:, :-1]
        grow[:, :-1] |= bad[:, 1:]
        good &= ~(bad | grow)
    gx = np.where(good, gx, np.nan)
    gy = np.where(good, gy, np.nan)
    return (GridField(grid=grid, values=np.where(grid.mask, gx, np.nan), nan_ok=True),
            GridField(grid=grid, values=np.where(grid.mask, gy, np.nan), nan_ok=True))


def omega_field(model: SdeModel, pair: SpectralPair, psi: PhaseField,
                u: GridField) -> OmegaField:
    """Drift correction Omega = 2 sum_ij G_ij d_i(ln u) d_j Psi."""
    grid = psi.grid
    umask = amplitude_mask(u.values, grid.mask)
    lnu = np.where(umask, np.log(np.where(umask, u.values, 1.0)), np.nan)
    lnu_f = np.nan_to_num(lnu)
    dlnu_dx, dlnu_dy = np.gradient(lnu_f, grid.hx, grid.hy, edge_order=2)
    gpx, gpy = _complex_phase_gradient(grid, psi.companion)
    pts = grid.points().reshape(-1, 2)
    G = diffusion_tensor(model, pts).reshape(grid.nx, grid.ny, 2, 2)
    om = 2.0 * (G[..., 0, 0] * dlnu_dx * gpx
                + G[..., 0, 1] * (dlnu_dx * gpy + dlnu_dy * gpx)
                + G[..., 1, 1] * dlnu_dy * gpy)
    # stencil pollution next to floored or masked nodes
    bad = ~umask
    grow = np.array(bad)
    grow[1:, :] |= bad[:-1, :]
    grow[:-1, :] |= bad[1:, :]
    grow[:, 1:] |= bad[:, :-1]
    grow[:, :-1] |= bad[:, 1:]
    good = umask & ~grow
    return OmegaField(grid=grid, values=np.where(good, om, np.nan),
                      omega1=float(pair.lam.imag), u_mask=good)


def drift_diagnostic_field(model: SdeModel, P0: GridField,
                           pair: SpectralPair) -> GridField:
    """Density-weighted phase-advance field P0 * (omega_1 - Omega)."""
    x_ref = default_x_ref(P0, GridField(grid=pair.Q.grid,
                                        values=np.abs(pair.Q.values)))
    psi, u = asymptotic_phase(pair, x_ref)
    om = omega_field(model, pair, psi, u)
    vals = P0.values * (om.omega1 - om.values)
    vals = np.where(om.u_mask, vals, 0.0)   # floored core carries no weight
    vals = np.where(P0.grid.mask, vals, np.nan)
    return GridField(grid=P0.grid, values=vals, meta={"omega1": om.omega1})


def _cut_crossings(grid, cut: CutSpec, rows_xy, cols_xy):
    """Signed crossing indicator for stencil edges against the cut ray.

    +1 when the edge goes from the negative to the positive side of the
    cut line within the ray's half-plane, -1 the other way, 0 otherwise.
    """
    ax, ay = cut.anchor
    if cut.angle_deg in (0, 180):
        # horizontal ray: cut line y = ay, edge must straddle it
        side_a = rows_xy[:, 1] - ay
        side_b = cols_xy[:, 1] - ay
        mid = 0.5 * (rows_xy[:, 0] + cols_xy[:, 0])
        on_ray = mid >= ax if cut.angle_deg == 0 else mid <= ax
        near = np.abs(rows_xy[:, 1] - cols_xy[:, 1]) <= 1.5 * grid.hy
    else:
        side_a = rows_xy[:, 0] - ax
        side_b = cols_xy[:, 0] - ax
        mid = 0.5 * (rows_xy[:, 1] + cols_xy[:, 1])
        on_ray = mid >= ay if cut.angle_deg == 90 else mid <= ay
        near = np.abs(rows_xy[:, 0] - cols_xy[:, 0]) <= 1.5 * grid.hx
    crosses = (side_a * side_b < 0) & on_ray & near
    return np.where(crosses, np.sign(side_b - side_a), 0.0)


def _snap_cut(grid, cut: CutSpec):
    """Shift the cut line to run between two node rows/columns."""
    ax, ay = cut.anchor
    if cut.angle_deg in (0, 180):
        j0 = int(np.clip(np.floor((ay - grid.y_min) / grid.hy), 0, grid.ny - 2))
        return CutSpec(anchor=(ax, grid.y_min + (j0 + 0.5) * grid.hy),
                       angle_deg=cut.angle_deg)
    i0 = int(np.clip(np.floor((ax - grid.x_min) / grid.hx), 0, grid.nx - 2))
    return CutSpec(anchor=(grid.x_min + (i0 + 0.5) * grid.hx, ay),
                   angle_deg=cut.angle_deg)


def mrt_solve(model: SdeModel, grid: Grid2D, cut: CutSpec = None,
              backward: SparseOperator = None, anchor_node=None) -> MrtSolution:
    """Mean-return-time function from one augmented sparse solve.

    Unknowns are the nodal T values plus the scalar Tbar; stencil entries
    whose edge crosses the cut ray carry a +-Tbar offset, and one gauge row
    pins T at the anchor node.  The sign of the solved Tbar encodes the
    rotation sense; it is stored as orientation with Tbar kept positive.
    """
    G = diffusion_tensor(model, grid.points().reshape(-1, 2))
    if np.any(np.linalg.eigvalsh(G).min(axis=-1) <= 0):
        raise ValueError("diffusion tensor not strongly elliptic on the grid")
    if backward is None:
        backward = assemble_backward(model, grid)
    B = backward.matrix.tocoo()
    n = B.shape[0]
    X, Y = grid.mesh()
    xy = np.column_stack([X[grid.mask], Y[grid.mask]])
    if cut is None:
        forward = assemble_forward(model, grid, backward=backward)
        P0 = stationary_density(forward)
        cut = CutSpec(anchor=tuple(density_centroid(P0)))
    cut = _snap_cut(grid, cut)
    sgn = _cut_crossings(grid, cut, xy[B.row], xy[B.col])
    if not np.any(sgn != 0):
        raise BadCutError("no stencil edge crosses the cut ray")
    # column n: sum of c * sign over crossing entries per row
    tbar_col = np.zeros(n)
    np.add.at(tbar_col, B.row, B.data * sgn)
    if anchor_node is None:
        forward = assemble_forward(model, grid, backward=backward)
        P0 = stationary_density(forward)
        u_proxy = GridField(grid=grid, values=np.where(grid.mask, 1.0, np.nan))
        x_ref = default_x_ref(P0, u_proxy, core=np.asarray(cut.anchor))
        anchor_node = grid.nearest_node(x_ref)
    idx = grid.index_map()
    a_lin = idx[anchor_node[0], anchor_node[1]]
    if a_lin < 0:
        raise BadCutError("anchor node is masked")
    rows = np.concatenate([B.row, np.arange(n), [n]])
    cols = np.concatenate([B.col, np.full(n, n), [a_lin]])
    vals = np.concatenate([B.data, tbar_col, [1.0]])
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n + 1, n + 1)).tocsc()
    b = np.concatenate([-np.ones(n), [0.0]])
    try:
        sol = spla.splu(A).solve(b)
    except RuntimeError as err:
        raise BadCutError("augmented system singular: %s" % err)
    T, tbar_signed = sol[:n], sol[n]
    if not np.isfinite(tbar_signed) or abs(tbar_signed) < 1e-12:
        raise BadCutError("degenerate mean period %r" % tbar_signed)
    # normalize Tbar > 0 by flipping the jump column; the same T still
    # solves the system, and Theta = (2 pi / Tbar)(T0 - T) then advances
    # along the mean rotation.  orientation +1 = flow crosses the cut in
    # the upward/leftward sense (counterclockwise for the +x ray).
    orientation = 1 if tbar_signed < 0 else -1
    if tbar_signed < 0:
        tbar_col = -tbar_col
        tbar_signed = -tbar_signed
    resid = backward.matrix @ T + tbar_col * tbar_signed + 1.0
    Tfield = GridField(grid=grid, values=grid.scatter(T))
    return MrtSolution(T=Tfield, tbar=float(tbar_signed),
                       orientation=orientation, cut=cut,
                       anchor_node=tuple(anchor_node), backward=backward,
                       cut_column=tbar_col,
                       meta={"residual_max": float(np.max(np.abs(resid)))})


def mrt_phase(sol: MrtSolution, x_ref=None) -> PhaseField:
    """MRT phase Theta = (2 pi / Tbar)(T0 - T), wrapped, anchored at x_ref.

    The signed period orients Theta to increase along the mean rotation.
    """
    grid = sol.T.grid
    if x_ref is None:
        x_ref = np.array([grid.xs[sol.anchor_node[0]], grid.ys[sol.anchor_node[1]]])
    i, j = grid.nearest_node(x_ref)
    if not grid.mask[i, j]:
        raise BadReferenceError("x_ref at a masked node")
    T0 = sol.T.values[i, j]
    theta = (TWO_PI / sol.tbar) * (T0 - sol.T.values)
    companion = np.where(grid.mask, np.exp(1j * theta), np.nan)
    # exact re-anchor through the interpolated companion
    ref = _bilinear_complex(grid, companion, x_ref)
    companion = companion * np.exp(-1j * np.angle(ref))
    psi = np.mod(np.angle(companion), TWO_PI)
    return PhaseField(grid=grid, psi=np.where(grid.mask, psi, np.nan),
                      companion=companion, label="mrt",
                      x_ref=np.asarray(x_ref, dtype=float),
                      meta={"tbar": sol.tbar, "orientation": sol.orientation})


def mrt_generator_residual(sol: MrtSolution):
    """Max residual of the generator identity on the unwrapped MRT phase.

    Applies the backward operator to the unwrapped representative of Theta
    (with the cut offsets restored) and compares against the constant
    2 pi / Tbar; zero up to the linear-solve residual by construction.
    """
    grid = sol.T.grid
    T = grid.gather(sol.T.values)
    lhs = sol.backward.matrix @ T + sol.cut_column * sol.tbar
    scale = -TWO_PI / sol.tbar
    return float(np.max(np.abs(scale * lhs - TWO_PI / sol.tbar)))


def cut_jump_check(sol: MrtSolution, skip_fraction=0.25):
    """Two-sided extrapolated jump of T across the cut, relative to Tbar.

    The imposed jump is exactly Tbar inside the augmented stencil; nodal
    differences across the cut line additionally contain the smooth O(h)
    variation of T, so the limit is estimated by linear extrapolation from
    two nodes on each side.  The first skip_fraction of the ray (nearest
    the phaseless core, where T's curvature defeats the extrapolation) is
    excluded.
    """
    grid = sol.T.grid
    cut = sol.cut
    ax, ay = cut.anchor
    Tv = sol.T.values
    if cut.angle_deg in (0, 180):
        j0 = int(np.floor((ay - grid.y_min) / grid.hy))
        if not (1 <= j0 and j0 + 2 < grid.ny):
            raise BadCutError("cut too close to the boundary for the jump check")
        if cut.angle_deg == 0:
            reach = grid.x_max - ax
            cols = np.nonzero(grid.xs >= ax + skip_fraction * reach)[0]
        else:
            reach = ax - grid.x_min
            cols = np.nonzero(grid.xs <= ax - skip_fraction * reach)[0]
        below = 1.5 * Tv[cols, j0] - 0.5 * Tv[cols, j0 - 1]
        above = 1.5 * Tv[cols, j0 + 1] - 0.5 * Tv[cols, j0 + 2]
    else:
        i0 = int(np.floor((ax - grid.x_min) / grid.hx))
        if not (1 <= i0 and i0 + 2 < grid.nx):
            raise BadCutError("cut too close to the boundary for the jump check")
        if cut.angle_deg == 90:
            reach = grid.y_max - ay
            cols = np.nonzero(grid.ys >= ay + skip_fraction * reach)[0]
        else:
            reach = ay - grid.y_min
            cols = np.nonzero(grid.ys <= ay - skip_fraction * reach)[0]
        below = 1.5 * Tv[i0, cols] - 0.5 * Tv[i0 - 1, cols]
        above = 1.5 * Tv[i0 + 1, cols] - 0.5 * Tv[i0 + 2, cols]
    jump = np.abs(below - above)
    good = np.isfinite(jump)
    return float(np.max(np.abs(jump[good] - sol.tbar)) / sol.tbar)


def winding_number(field: PhaseField, center=None, radius=None, n_samples=720):
    """Winding of the phase along the domain's mid-radius loop."""
    grid = field.grid
    if center is None:
        center = 0.5 * np.array([grid.x_min + grid.x_max, grid.y_min + grid.y_max])
    if radius is None:
        radius = 0.25 * min(grid.x_max - grid.x_min, grid.y_max - grid.y_min)
    if radius <= 0:
        raise ValueError("need a positive loop radius")
    ang = np.linspace(0.0, TWO_PI, n_samples, endpoint=True)
    total = 0.0
    prev = None
    for a in ang:
        p = center + radius * np.array([np.cos(a), np.sin(a)])
        ph = phase_lookup(field, p)
        if prev is not None:
            d = np.pi - np.mod(np.pi - (ph - prev), TWO_PI)
            total += d
        prev = ph
    return int(np.rint(total / TWO_PI))


def circular_correlation(field_a: PhaseField, field_b: PhaseField,
                         weights: GridField = None, sel=None):
    """|weighted mean of e^{i(a-b)}|: 1 when the fields differ by a constant."""
    grid = field_a.grid
    if sel is None:
        sel = grid.mask
    w = grid.quad_weights()[sel]
    if weights is not None:
        w = w * weights.values[sel]
    z = np.exp(1j * (field_a.psi[sel] - field_b.psi[sel]))
    good = np.isfinite(z) & np.isfinite(w)
    return float(np.abs(np.sum(w[good] * z[good]) / np.sum(w[good])))
