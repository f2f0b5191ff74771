"""Finite-difference Kolmogorov operators on 2D grids with zero-flux walls.

The backward operator B discretizes L+[F] = f.grad F + G : hess F with
second-order central differences; reflecting boundaries enter through
ghost-node elimination (mirror closure of the stencil, exact for diagonal
G).  The forward operator is the discrete adjoint F = W^-1 B^T W with W the
trapezoid quadrature weights, which makes adjointness, probability
conservation and biorthogonality hold to solver precision by construction.

Eigenproblems go through ARPACK shift-invert with deterministic start
vectors (dense fallback on small grids).  The shift for the slowest
complex mode comes from the dominant oscillation frequency of a short
simulated trajectory.
"""

import json
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .models import SdeModel, diffusion_tensor, EPS_ORIGIN

TWO_PI = 2.0 * np.pi

# dense eigensolver cutoff (number of unknowns)
DENSE_MAX = 1500

# Peclet fraction above which a central-difference grid is flagged
PECLET_WARN_FRACTION = 0.4


class NonErgodicError(RuntimeError):
    """Zero eigenvalue of the forward operator is absent or not simple."""


class NotOscillatoryError(RuntimeError):
    """Slowest nontrivial mode is real: no rotation to define a phase."""


class AmbiguousModeError(RuntimeError):
    """Another eigenvalue lies within 1e-3 of the slowest mode."""


class ResolutionWarning(UserWarning):
    """Cell Peclet number large on much of the grid."""


@dataclass(frozen=True)
class Grid2D:
    """Tensor-product node grid over [x_min,x_max] x [y_min,y_max].

    mask is an (nx, ny) boolean array, True at valid nodes; singular-set
    nodes (e.g. the SNIC origin) are False and excluded from the operator
    and all quadrature.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int
    mask: np.ndarray = None

    def __post_init__(self):
        if self.nx < 16 or self.ny < 16:
            raise ValueError("need nx, ny >= 16")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError("degenerate bounds")
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones((self.nx, self.ny), dtype=bool))
        else:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != (self.nx, self.ny):
                raise ValueError("mask shape mismatch")
            object.__setattr__(self, "mask", m)

    @classmethod
    def from_model(cls, model: SdeModel, nx=201, ny=201):
        """Grid over domain_hint; SNIC-type singular nodes are masked."""
        (x0, x1), (y0, y1) = model.domain_hint[:2]
        g = cls(x0, x1, y0, y1, nx, ny)
        if model.name == "snic":
            X, Y = g.mesh()
            mask = np.hypot(X, Y) >= EPS_ORIGIN
            g = cls(x0, x1, y0, y1, nx, ny, mask=mask)
        return g

    @property
    def hx(self):
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def hy(self):
        return (self.y_max - self.y_min) / (self.ny - 1)

    @property
    def xs(self):
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def ys(self):
        return np.linspace(self.y_min, self.y_max, self.ny)

    def mesh(self):
        return np.meshgrid(self.xs, self.ys, indexing="ij")

    def points(self):
        X, Y = self.mesh()
        return np.stack([X, Y], axis=-1)

    def quad_weights(self):
        """Trapezoid cell weights (nx, ny); zero at masked nodes."""
        cx = np.ones(self.nx)
        cx[0] = cx[-1] = 0.5
        cy = np.ones(self.ny)
        cy[0] = cy[-1] = 0.5
        w = self.hx * self.hy * np.outer(cx, cy)
        w[~self.mask] = 0.0
        return w

    def index_map(self):
        """Linear index of each unmasked node in the unknown vector, -1 if masked."""
        idx = -np.ones((self.nx, self.ny), dtype=np.int64)
        idx[self.mask] = np.arange(int(self.mask.sum()))
        return idx

    @property
    def n_unknowns(self):
        return int(self.mask.sum())

    def gather(self, full):
        return np.asarray(full)[self.mask]

    def scatter(self, vec, fill=np.nan):
        full = np.full((self.nx, self.ny), fill, dtype=np.asarray(vec).dtype)
        full[self.mask] = vec
        return full

    def nearest_node(self, point):
        i = int(np.clip(round((point[0] - self.x_min) / self.hx), 0, self.nx - 1))
        j = int(np.clip(round((point[1] - self.y_min) / self.hy), 0, self.ny - 1))
        return i, j


@dataclass
class GridField:
    """Real or complex values sampled on a Grid2D (NaN at masked nodes).

    nan_ok permits NaN holes at unmasked nodes for derived fields that
    floor-mask their own invalid regions (phase gradients, Omega).
    """

    grid: Grid2D
    values: np.ndarray
    meta: dict = dc_field(default_factory=dict)
    nan_ok: bool = False

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != (self.grid.nx, self.grid.ny):
            raise ValueError("values shape mismatch")
        if not self.nan_ok and not np.all(np.isfinite(v[self.grid.mask])):
            raise ValueError("non-finite values at unmasked nodes")
        self.values = v

    def integral(self):
        w = self.grid.quad_weights()
        return np.sum(w[self.grid.mask] * self.values[self.grid.mask])

    def to_csv(self, path):
        X, Y = self.grid.mesh()
        m = self.grid.mask
        if np.iscomplexobj(self.values):
            data = np.column_stack([X[m], Y[m], self.values[m].real, self.values[m].imag])
            header = "x,y,value,value_imag"
        else:
            data = np.column_stack([X[m], Y[m], self.values[m]])
            header = "x,y,value"
        np.savetxt(path, data, delimiter=",", header=header, comments="")

    def to_raw(self, path_prefix):
        """Row-major float64 block(s) plus a JSON sidecar."""
        g = self.grid
        if np.iscomplexobj(self.values):
            np.ascontiguousarray(self.values.real, dtype=np.float64).tofile(path_prefix + ".re.f64")
            np.ascontiguousarray(self.values.imag, dtype=np.float64).tofile(path_prefix + ".im.f64")
        else:
            np.ascontiguousarray(self.values, dtype=np.float64).tofile(path_prefix + ".f64")
        import hashlib
        digest = hashlib.sha256(np.packbits(g.mask).tobytes()).hexdigest()
        sidecar = {"x_min": g.x_min, "x_max": g.x_max, "y_min": g.y_min,
                   "y_max": g.y_max, "nx": g.nx, "ny": g.ny,
                   "complex": bool(np.iscomplexobj(self.values)),
                   "mask_sha256": digest}
        with open(path_prefix + ".json", "w") as f:
            json.dump(sidecar, f, indent=1)


@dataclass
class SparseOperator:
    """Sparse discretization of a Kolmogorov operator over unmasked nodes."""

    matrix: sp.csr_matrix
    grid: Grid2D
    kind: str                      # "backward" | "forward"
    model: SdeModel = None
    meta: dict = dc_field(default_factory=dict)

    @property
    def weights(self):
        return self.grid.quad_weights()[self.grid.mask]


def _neighbor_index(i, di, n):
    """Mirror ghost nodes back into the grid (zero-derivative closure)."""
    ni = i + di
    ni = np.where(ni < 0, -ni, ni)
    ni = np.where(ni > n - 1, 2 * (n - 1) - ni, ni)
    return ni


def assemble_backward(model: SdeModel, grid: Grid2D, scheme="central") -> SparseOperator:
    """Discretize L+[F] = f.grad F + G : hess F on the grid.

    scheme "central" uses second-order central differences throughout;
    "upwind" switches the first-derivative stencil to one-sided wherever
    the cell Peclet number exceeds 2 (positivity over accuracy; central is
    the default because the added numerical diffusion |f| h / 2 swamps
    small noise intensities and shifts the slow eigenvalues).  The mirror
    boundary closure implements (G grad F) . n = 0 for diagonal G.
    """
    if model.dim != 2:
        raise ValueError("finite differences are 2D only; use gedmd beyond")
    if scheme not in ("central", "upwind"):
        raise ValueError("scheme must be 'central' or 'upwind'")
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy
    idx = grid.index_map()
    mask = grid.mask
    ii, jj = np.nonzero(mask)
    pts = np.column_stack([grid.xs[ii], grid.ys[jj]])
    f = model.drift(pts)
    G = diffusion_tensor(model, pts)
    gxx, gxy, gyy = G[:, 0, 0], G[:, 0, 1], G[:, 1, 1]

    with np.errstate(divide="ignore"):
        pe = np.maximum(np.abs(f[:, 0]) * hx / np.where(gxx > 0, gxx, np.inf),
                        np.abs(f[:, 1]) * hy / np.where(gyy > 0, gyy, np.inf))
    pe_fraction = float(np.mean(pe > 2.0))
    if scheme == "central" and pe_fraction > PECLET_WARN_FRACTION:
        warnings.warn("cell Peclet > 2 on %.0f%% of nodes; stationary density "
                      "may ripple (slow eigenvalues are unaffected)"
                      % (100 * pe_fraction), ResolutionWarning)

    rows, cols, vals = [], [], []
    center = np.zeros(len(ii))

    def add(di, dj, coeff):
        # ghost mirror in each axis, then redirect masked targets to the center
        ni = _neighbor_index(ii, di, nx)
        nj = _neighbor_index(jj, dj, ny)
        target = idx[ni, nj]
        bad = target < 0
        if np.any(bad):
            target = np.where(bad, idx[ii, jj], target)
        rows.append(idx[ii, jj])
        cols.append(target)
        vals.append(np.asarray(coeff, dtype=float) * np.ones(len(ii)))

    if scheme == "upwind":
        up = pe > 2.0
        fx, fy = f[:, 0], f[:, 1]
        # one-sided first derivatives on flagged nodes, central elsewhere
        cxp = np.where(up, np.where(fx > 0, fx / hx, 0.0), fx / (2 * hx))
        cxm = np.where(up, np.where(fx > 0, 0.0, -fx / hx), -fx / (2 * hx))
        cyp = np.where(up, np.where(fy > 0, fy / hy, 0.0), fy / (2 * hy))
        cym = np.where(up, np.where(fy > 0, 0.0, -fy / hy), -fy / (2 * hy))
        add(+1, 0, cxp)
        add(-1, 0, cxm)
        add(0, +1, cyp)
        add(0, -1, cym)
        center -= cxp + cxm + cyp + cym
    else:
        add(+1, 0, f[:, 0] / (2 * hx))
        add(-1, 0, -f[:, 0] / (2 * hx))
        add(0, +1, f[:, 1] / (2 * hy))
        add(0, -1, -f[:, 1] / (2 * hy))

    add(+1, 0, gxx / hx ** 2)
    add(-1, 0, gxx / hx ** 2)
    add(0, +1, gyy / hy ** 2)
    add(0, -1, gyy / hy ** 2)
    center += -2 * gxx / hx ** 2 - 2 * gyy / hy ** 2

    if np.any(gxy != 0):
        c = 2 * gxy / (4 * hx * hy)
        add(+1, +1, c)
        add(-1, -1, c)
        add(+1, -1, -c)
        add(-1, +1, -c)

    rows.append(idx[ii, jj])
    cols.append(idx[ii, jj])
    vals.append(center)

    n = grid.n_unknowns
    B = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    return SparseOperator(matrix=B, grid=grid, kind="backward", model=model,
                          meta={"scheme": scheme, "pe_fraction": pe_fraction})


def assemble_forward(model: SdeModel, grid: Grid2D, scheme="central",
                     backward: SparseOperator = None) -> SparseOperator:
    """Discrete adjoint of the backward operator: F = W^-1 B^T W.

    Adjointness <B u, v>_W = <u, F v>_W and exact probability conservation
    (w^T F = 0 because B 1 = 0) hold by construction.
    """
    if backward is None:
        backward = assemble_backward(model, grid, scheme=scheme)
    w = backward.weights
    Fm = sp.diags(1.0 / w) @ backward.matrix.T.tocsr() @ sp.diags(w)
    return SparseOperator(matrix=Fm.tocsr(), grid=grid, kind="forward",
                          model=model, meta=dict(backward.meta))


def _deterministic_v0(n):
    return np.ones(n) / np.sqrt(n)


def stationary_density(forward: SparseOperator, grid: Grid2D = None) -> GridField:
    """Nullspace of the forward operator, clipped and normalized to mass 1.

    Solved directly: one operator row is replaced by the quadrature row
    (total mass = 1); simplicity of the zero eigenvalue is then checked via
    the residual of the solved vector and a second Arnoldi eigenvalue.
    """
    grid = grid or forward.grid
    Fm = forward.matrix
    n = Fm.shape[0]
    w = forward.weights
    A = Fm.tolil(copy=True)
    r = int(np.argmax(w))
    A[r, :] = w
    b = np.zeros(n)
    b[r] = 1.0
    try:
        p = spla.splu(A.tocsc()).solve(b)
    except RuntimeError as err:
        raise NonErgodicError("singular stationary solve: %s" % err)
    resid = np.abs(Fm @ p)
    resid[r] = 0.0
    scale = np.max(np.abs(p)) * np.max(np.abs(Fm).sum(axis=1))
    if np.max(resid) > 1e-8 * scale:
        raise NonErgodicError("stationary residual %.2e above gate" % np.max(resid))
    if n > 3:
        k = min(3, n - 2)
        lam = spla.eigs(Fm, k=k, sigma=1e-8, which="LM", v0=_deterministic_v0(n),
                        return_eigenvectors=False, maxiter=10000, tol=1e-9)
        near_zero = np.sum(np.abs(lam) < 1e-8)
        if near_zero != 1:
            raise NonErgodicError("%d near-zero eigenvalues; zero mode not simple"
                                  % near_zero)
    clip_mass = float(np.sum(w[p < 0] * np.abs(p[p < 0])))
    p = np.maximum(p, 0.0)
    p /= np.sum(w * p)
    return GridField(grid=grid, values=grid.scatter(p),
                     meta={"clip_mass": clip_mass})


def _fields_on_grid(model, grid):
    """Drift and diffusion tensor on the mesh, zero at masked nodes."""
    X, Y = grid.mesh()
    pts = np.column_stack([X[grid.mask], Y[grid.mask]])
    f = np.zeros((grid.nx, grid.ny, 2))
    G = np.zeros((grid.nx, grid.ny, 2, 2))
    f[grid.mask] = model.drift(pts)
    G[grid.mask] = diffusion_tensor(model, pts)
    return f, G


def _product_gradient(grid, field2d):
    """Central differences with mirror closure; NaNs treated as 0 weight."""
    v = np.array(field2d, dtype=float)
    v[~grid.mask] = 0.0
    dx = np.empty_like(v)
    dy = np.empty_like(v)
    dx[1:-1, :] = (v[2:, :] - v[:-2, :]) / (2 * grid.hx)
    dx[0, :] = 0.0
    dx[-1, :] = 0.0
    dy[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2 * grid.hy)
    dy[:, 0] = 0.0
    dy[:, -1] = 0.0
    return dx, dy


def stationary_current(model: SdeModel, P0: GridField):
    """Stationary probability current J = f P - grad(G P), node-centered.

    Returns (Jx, Jy) GridFields.  Use flux_divergence for the conservative
    check: it differences the same product stencils the forward operator is
    built from, so it vanishes to solver precision in the interior.
    """
    grid = P0.grid
    mask = grid.mask
    P = np.where(mask, P0.values, 0.0)
    f, G = _fields_on_grid(model, grid)
    dGxxP_dx, _ = _product_gradient(grid, G[..., 0, 0] * P)
    dGxyP_dx, dGxyP_dy = _product_gradient(grid, G[..., 0, 1] * P)
    _, dGyyP_dy = _product_gradient(grid, G[..., 1, 1] * P)
    Jx = f[..., 0] * P - dGxxP_dx - dGxyP_dy
    Jy = f[..., 1] * P - dGxyP_dx - dGyyP_dy
    return (GridField(grid=grid, values=np.where(mask, Jx, np.nan)),
            GridField(grid=grid, values=np.where(mask, Jy, np.nan)))


def flux_divergence(model: SdeModel, P0: GridField) -> np.ndarray:
    """Divergence of the discrete flux on interior nodes (flux form).

    Equals minus the interior forward-operator action on P0, i.e. zero for
    the stationary density up to the linear-solve residual.
    """
    grid = P0.grid
    P = np.where(grid.mask, P0.values, 0.0)
    f, G = _fields_on_grid(model, grid)
    fxP = f[..., 0] * P
    fyP = f[..., 1] * P
    gxxP = G[..., 0, 0] * P
    gyyP = G[..., 1, 1] * P
    div = np.full_like(P, np.nan)
    div[1:-1, 1:-1] = (
        (fxP[2:, 1:-1] - fxP[:-2, 1:-1]) / (2 * grid.hx)
        + (fyP[1:-1, 2:] - fyP[1:-1, :-2]) / (2 * grid.hy)
        - (gxxP[2:, 1:-1] - 2 * gxxP[1:-1, 1:-1] + gxxP[:-2, 1:-1]) / grid.hx ** 2
        - (gyyP[1:-1, 2:] - 2 * gyyP[1:-1, 1:-1] + gyyP[1:-1, :-2]) / grid.hy ** 2)
    if np.any(G[..., 0, 1] != 0):
        gxyP = G[..., 0, 1] * P
        div[1:-1, 1:-1] -= 2 * (gxyP[2:, 2:] - gxyP[2:, :-2]
                                - gxyP[:-2, 2:] + gxyP[:-2, :-2]) / (4 * grid.hx * grid.hy)
    return div


def estimate_frequency(model: SdeModel, t_end=200.0, dt=1e-3, seed=1234):
    """Dominant oscillation frequency (rad/time) of a short trajectory."""
    from .simulate import euler_maruyama, stationary_states
    x0 = stationary_states(model, 1, seed=seed, t_burn=20.0, dt=dt)[0]
    stride = max(1, int(round(0.01 / dt)))
    tr = euler_maruyama(model, x0, dt, int(round(t_end / dt)), seed=seed,
                        record_stride=stride)
    sig = tr.states[:, 0] - np.mean(tr.states[:, 0])
    spec = np.abs(np.fft.rfft(sig * np.hanning(sig.size))) ** 2
    freqs = np.fft.rfftfreq(sig.size, d=stride * dt)
    peak = 1 + int(np.argmax(spec[1:]))
    return TWO_PI * float(freqs[peak])


def _shift_invert(op: SparseOperator, sigma, k=6):
    n = op.matrix.shape[0]
    k = min(k, n - 2)
    lam, vecs = spla.eigs(op.matrix.tocsc().astype(complex), k=k, sigma=sigma,
                          which="LM", v0=_deterministic_v0(n), maxiter=10000,
                          tol=1e-9)
    order = np.argsort(-lam.real)
    return lam[order], vecs[:, order]


def leading_spectrum(op: SparseOperator, count=20, omega_max=None):
    """Eigenvalues with the largest real parts, conjugate-completed.

    Shift-invert sweeps along the imaginary axis up to omega_max (default
    four harmonics of the trajectory-estimated base frequency); on grids
    below DENSE_MAX unknowns a dense solve replaces the sweep.
    """
    if count > 100:
        raise ValueError("count capped at 100")
    n = op.matrix.shape[0]
    if n <= DENSE_MAX:
        lam = np.linalg.eigvals(op.matrix.toarray())
    else:
        if omega_max is None:
            if op.model is None:
                raise ValueError("need omega_max when the operator has no model")
            omega_max = 4.5 * max(estimate_frequency(op.model), 1e-2)
        shifts = [1e-3 + 0j]
        n_shifts = max(4, int(np.ceil(omega_max / 0.9)))
        for wshift in np.linspace(0.0, omega_max, n_shifts):
            shifts.append(-0.05 + 1j * wshift)
        found = []
        for sg in shifts:
            try:
                lam_s, _ = _shift_invert(op, sg, k=8)
            except spla.ArpackNoConvergence as err:
                lam_s = np.asarray(err.eigenvalues)
                if lam_s.size == 0:
                    continue
            found.append(lam_s)
        lam = np.concatenate(found)
    # conjugate-complete, dedupe against self and mirror
    lam = lam[lam.imag > -1e-12]
    lam = np.concatenate([lam, np.conj(lam[lam.imag > 1e-12])])
    lam = lam[np.argsort(-lam.real)]
    keep = []
    for ev in lam:
        if all(abs(ev - kv) > 1e-6 * max(1.0, abs(kv)) for kv in keep):
            keep.append(ev)
    keep = np.array(sorted(keep, key=lambda z: (-z.real, z.imag)))
    return keep[:count]


@dataclass
class SpectralPair:
    """A (lambda, P, Q) triple normalized so int Q P dx = 1."""

    lam: complex
    P: GridField
    Q: GridField

    def __post_init__(self):
        if self.lam.real > 1e-8:
            raise ValueError("eigenvalue with positive real part %s" % self.lam)


def pair_product(a: SpectralPair, b: SpectralPair):
    """Bilinear pairing int Q_a P_b dx on the common grid."""
    grid = a.Q.grid
    w = grid.quad_weights()[grid.mask]
    return np.sum(w * a.Q.values[grid.mask] * b.P.values[grid.mask])


def biorthogonality_check(pairs):
    """Max deviation of the pairing matrix from the identity."""
    dev = 0.0
    for i, a in enumerate(pairs):
        for j, b in enumerate(pairs):
            dev = max(dev, abs(pair_product(a, b) - (1.0 if i == j else 0.0)))
    return dev


def slowest_mode(backward: SparseOperator, forward: SparseOperator,
                 omega_hint=None) -> SpectralPair:
    """The slowest nontrivial complex mode (lambda_1, P_1, Q*_1).

    The omega_1 > 0 branch is returned; the pair is normalized to
    int Q P = 1 and Q's global phase is fixed to be real-positive at the
    highest-P0-weighted amplitude node, making reruns reproducible.
    """
    grid = backward.grid
    n = backward.matrix.shape[0]
    if omega_hint is None:
        if n <= DENSE_MAX:
            lam_all = leading_spectrum(backward, count=10)
            cands = lam_all[(np.abs(lam_all) > 1e-8) & (lam_all.imag > 1e-9)]
            if cands.size == 0:
                raise NotOscillatoryError("no complex eigenvalue found")
            omega_hint = float(cands[0].imag)
        else:
            omega_hint = max(estimate_frequency(backward.model), 1e-2)
    lamB, vecB = _shift_invert(backward, 1j * omega_hint, k=8)
    nontrivial = np.abs(lamB) > 1e-8
    if not np.any(nontrivial):
        raise NotOscillatoryError("only the trivial mode near the shift")
    pick = int(np.nonzero(nontrivial)[0][0])
    lam1 = lamB[pick]
    if abs(lam1.imag) < 1e-8:
        raise NotOscillatoryError("slowest nontrivial mode is real: %s" % lam1)
    others = np.concatenate([lamB[:pick], lamB[pick + 1:]])
    others = others[np.abs(others - np.conj(lam1)) > 1e-9]
    if others.size and np.min(np.abs(others - lam1)) < 1e-3:
        raise AmbiguousModeError("eigenvalue within 1e-3 of lambda_1 = %s" % lam1)
    q = vecB[:, pick]
    if lam1.imag < 0:
        lam1 = np.conj(lam1)
        q = np.conj(q)
    # forward eigenvector at the same eigenvalue
    lamF, vecF = _shift_invert(forward, lam1, k=4)
    jF = int(np.argmin(np.abs(lamF - lam1)))
    if abs(lamF[jF] - lam1) > 1e-6 * max(1.0, abs(lam1)):
        raise AmbiguousModeError("forward eigenvalue mismatch: %s vs %s"
                                 % (lamF[jF], lam1))
    pvec = vecF[:, jF]
    w = backward.weights
    # gauge: Q real-positive where P0-weighted amplitude peaks
    p0 = stationary_density(forward)
    anchor = int(np.argmax(np.abs(q) * p0.values[grid.mask]))
    q = q * np.exp(-1j * np.angle(q[anchor]))
    prod = np.sum(w * q * pvec)
    if abs(prod) < 1e-300:
        raise AmbiguousModeError("degenerate pairing between Q and P")
    pvec = pvec / prod
    return SpectralPair(lam=complex(lam1),
                        P=GridField(grid=grid, values=grid.scatter(pvec)),
                        Q=GridField(grid=grid, values=grid.scatter(q)))


def robustly_oscillatory_check(spectrum, q_min=10.0):
    """Screen: unique complex slowest mode, quality factor, spectral gap.

    Returns a dict with q_factor, gap_ratio and verdict; when the verdict
    is False, 'reason' names the failing condition.
    """
    lam = np.asarray(spectrum, dtype=complex)
    nontrivial = lam[np.abs(lam) > 1e-8]
    if nontrivial.size < 3:
        raise ValueError("need at least 3 nontrivial eigenvalues")
    order = np.argsort(-nontrivial.real)
    lam1 = nontrivial[order[0]]
    report = {"lambda1": complex(lam1), "q_factor": np.nan,
              "gap_ratio": np.nan, "verdict": False, "reason": ""}
    if abs(lam1.imag) < 1e-12:
        report["reason"] = "slowest nontrivial eigenvalue is real"
        return report
    if lam1.imag < 0:
        lam1 = np.conj(lam1)
    # uniqueness: no other eigenvalue (conjugate aside) shares the top real part
    rest = nontrivial[np.abs(nontrivial - lam1) > 1e-9]
    rest = rest[np.abs(rest - np.conj(lam1)) > 1e-9]
    report["q_factor"] = float(abs(lam1.imag / lam1.real))
    if rest.size:
        report["gap_ratio"] = float(np.min(np.abs(rest.real)) / abs(lam1.real))
        if np.max(rest.real) > lam1.real - 1e-12:
            report["reason"] = "slowest complex mode is not unique"
            return report
    if report["q_factor"] < q_min:
        report["reason"] = "quality factor %.2f below %.1f" % (report["q_factor"], q_min)
        return report
    if rest.size and np.min(np.abs(rest.real)) < 2 * abs(lam1.real):
        report["reason"] = "spectral gap below 2 |Re lambda_1|"
        return report
    report["verdict"] = True
    return report


def mass_truncation(P0: GridField, rings=2):
    """Stationary mass on the outermost grid rings (domain-size check)."""
    g = P0.grid
    w = g.quad_weights()
    inner = np.zeros_like(g.mask)
    inner[rings:-rings, rings:-rings] = True
    sel = g.mask & ~inner
    return float(np.sum(w[sel] * P0.values[sel]))


def spectrum_to_csv(spectrum, path):
    np.savetxt(path, np.column_stack([np.real(spectrum), np.imag(spectrum)]),
               delimiter=",", header="re,im", comments="")
