"""Discretization and linear-algebra substrate.

Divergence-form operators are discretized in flux form on uniform grids:
diagonal coefficients are sampled at face midpoints, the mixed term at cell
centers through the cell-averaged gradient pair, which keeps the assembled
operator exactly symmetric for symmetric coefficients and gives exact
discrete conservation (zero row sums for the pure-periodic operator).

Evolution uses backward Euler.  Cell problems are solved as one monolithic
space-time system with periodic time wrap, preconditioned by a
constant-coefficient FFT/DST symbol; single implicit steps are SPD and use
diagonally preconditioned CG, or an exact transverse-diagonalized direct
solve when the medium varies only along x1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grids import BoxTimeGrid, CylinderGrid, TorusGrid


class AssemblyError(ValueError):
    """Raised when a coefficient sampler violates the assembly preconditions."""


class SolverError(RuntimeError):
    """Raised on non-convergence; carries the final relative residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final relative residual {residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------------------
# coefficient sampling at staggered locations
# ---------------------------------------------------------------------------

def _eval_tensor(sampler, y1, y2, s):
    """Evaluate a sampler, accepting (a11, a22, a12) or (a11, a12, a21, a22)."""
    out = sampler(y1, y2, s)
    if len(out) == 3:
        a11, a22, a12 = out
    elif len(out) == 4:
        a11, a12, a21, a22 = out
        if not np.array_equal(np.asarray(a12), np.asarray(a21)):
            raise AssemblyError("coefficient sampler returned a non-symmetric matrix")
    else:
        raise AssemblyError("coefficient sampler must return 3 or 4 components")
    shape = np.broadcast_shapes(
        np.shape(y1), np.shape(y2), np.shape(s), np.shape(a11)
    )
    return (
        np.broadcast_to(np.asarray(a11, dtype=float), shape),
        np.broadcast_to(np.asarray(a22, dtype=float), shape),
        np.broadcast_to(np.asarray(a12, dtype=float), shape),
    )


def _check_elliptic(a11, a22, a12):
    mid = 0.5 * (a11 + a22)
    rad = np.sqrt(0.25 * (a11 - a22) ** 2 + a12 ** 2)
    lo = float(np.min(mid - rad))
    if lo <= 0.0:
        raise AssemblyError(f"coefficient not elliptic at samples (min eig {lo:.3g})")


@dataclass
class StaggeredCoefficients:
    """Face/cell samples of A on a structured (axis0, axis1, time) grid.

    a11: samples at axis0-face midpoints, a22: at axis1-face midpoints,
    a12: at cell centers (None when the medium is diagonal).  For a periodic
    axis the face count equals the node count (face i sits between nodes i
    and i+1 with wrap); for the Dirichlet axial axis it is n0 - 1.
    """

    a11: np.ndarray
    a22: np.ndarray
    a12: Optional[np.ndarray]
    spacings: tuple  # (h0, h1, tau)
    periodic0: bool


def sample_staggered(grid, sampler, diagonal: bool = False,
                     y1_offset: float = 0.0) -> StaggeredCoefficients:
    """Sample a coefficient field at the staggered locations of `grid`.

    `grid` is a TorusGrid or CylinderGrid; the time axis always carries the
    node times s_k (backward-Euler rows sample the coefficient at the row's
    own time level).
    """
    if isinstance(grid, TorusGrid):
        periodic0 = True
        x0 = np.arange(grid.n_space) * grid.h
        h0 = grid.h
    elif isinstance(grid, CylinderGrid):
        periodic0 = False
        x0 = grid.axial_coords()
        h0 = grid.h
    else:
        raise AssemblyError(f"unsupported grid type {type(grid)!r}")
    x1 = np.arange(grid.n_space) * grid.h
    s = (np.arange(grid.n_time) * grid.tau)[None, None, :]
    h1 = grid.h

    if periodic0:
        f0 = (x0 + 0.5 * h0)[:, None, None]
    else:
        f0 = (x0[:-1] + 0.5 * h0)[:, None, None]
    a11_f, a22_f, a12_f = _eval_tensor(sampler, f0 + y1_offset, x1[None, :, None], s)
    _check_elliptic(a11_f, a22_f, a12_f)
    a11 = a11_f

    f1 = (x1 + 0.5 * h1)[None, :, None]
    a11_g, a22_g, a12_g = _eval_tensor(sampler, x0[:, None, None] + y1_offset, f1, s)
    a22 = a22_g

    a12 = None
    if not diagonal:
        _, _, a12c = _eval_tensor(sampler, f0 + y1_offset, f1, s)
        if np.any(a12c != 0.0):
            a12 = a12c
    return StaggeredCoefficients(a11, a22, a12, (h0, h1, grid.tau), periodic0)


# ---------------------------------------------------------------------------
# stencil application (matrix-free; shares the assembly's flux form exactly)
# ---------------------------------------------------------------------------

def _axis0_flux(u, coeffs: StaggeredCoefficients):
    h0 = coeffs.spacings[0]
    if coeffs.periodic0:
        return coeffs.a11 * (np.roll(u, -1, axis=0) - u) / h0
    return coeffs.a11 * (u[1:] - u[:-1]) / h0


def _axis1_flux(u, coeffs: StaggeredCoefficients):
    h1 = coeffs.spacings[1]
    return coeffs.a22 * (np.roll(u, -1, axis=1) - u) / h1


def _cell_gradients(u, coeffs: StaggeredCoefficients):
    """Cell-averaged gradient pair (axis1 always periodic)."""
    h0, h1, _ = coeffs.spacings
    up1 = np.roll(u, -1, axis=1)
    if coeffs.periodic0:
        u_r = np.roll(u, -1, axis=0)
        u_r1 = np.roll(up1, -1, axis=0)
        g0 = (u_r + u_r1 - u - up1) / (2.0 * h0)
        g1 = (up1 + u_r1 - u - u_r) / (2.0 * h1)
    else:
        g0 = (u[1:] + up1[1:] - u[:-1] - up1[:-1]) / (2.0 * h0)
        g1 = (up1[:-1] + up1[1:] - u[:-1] - u[1:]) / (2.0 * h1)
    return g0, g1


def _scatter_axis1(F):
    return F - np.roll(F, 1, axis=1)


def _scatter_cells(P, Q, coeffs: StaggeredCoefficients):
    """Adjoint of the cell-gradient pair: sum_c P(c) w0 + Q(c) w1 at nodes."""
    h0, h1, _ = coeffs.spacings
    # contributions of cell (i0, i1) to its four corners
    # corner (d0, d1): w0 = (2*d0 - 1)/(2 h0), w1 = (2*d1 - 1)/(2 h1)
    if coeffs.periodic0:
        out = np.zeros_like(P)
        for d0 in (0, 1):
            for d1 in (0, 1):
                w0 = (2 * d0 - 1) / (2.0 * h0)
                w1 = (2 * d1 - 1) / (2.0 * h1)
                out += np.roll(np.roll(P * w0 + Q * w1, d0, axis=0), d1, axis=1)
        return out
    out = np.zeros((P.shape[0] + 1,) + P.shape[1:])
    for d0 in (0, 1):
        for d1 in (0, 1):
            w0 = (2 * d0 - 1) / (2.0 * h0)
            w1 = (2 * d1 - 1) / (2.0 * h1)
            contrib = np.roll(P * w0 + Q * w1, d1, axis=1)
            if d0 == 0:
                out[:-1] += contrib
            else:
                out[1:] += contrib
    return out


def apply_divergence_form(u: np.ndarray, coeffs: StaggeredCoefficients) -> np.ndarray:
    """Apply L = -div(A grad .) to a node field (interior rows valid for
    Dirichlet axis0; the two end layers are returned as zeros)."""
    h0, h1, _ = coeffs.spacings
    F0 = _axis0_flux(u, coeffs)
    F1 = _axis1_flux(u, coeffs)
    if coeffs.periodic0:
        out = -(F0 - np.roll(F0, 1, axis=0)) / h0
    else:
        out = np.zeros_like(u)
        out[1:-1] = -(F0[1:] - F0[:-1]) / h0
    out -= _scatter_axis1(F1) / h1
    if coeffs.a12 is not None:
        g0, g1 = _cell_gradients(u, coeffs)
        add = _scatter_cells(coeffs.a12 * g1, coeffs.a12 * g0, coeffs)
        if coeffs.periodic0:
            out += add
        else:
            out[1:-1] += add[1:-1]
            # end layers stay masked
    return out


def apply_to_affine(coeffs: StaggeredCoefficients, grad0, grad1) -> np.ndarray:
    """Apply L to a (piecewise-)affine field given its gradient at faces/cells.

    grad0/grad1 may be scalars or arrays already evaluated at axis0-faces,
    axis1-faces, and cells respectively via `affine_gradient_samples`.  For a
    globally constant gradient pass plain floats.
    """
    if np.isscalar(grad0):
        g0_f0 = g0_f1 = g0_c = float(grad0)
    else:
        g0_f0, g0_f1, g0_c = grad0
    if np.isscalar(grad1):
        g1_f0 = g1_f1 = g1_c = float(grad1)
    else:
        g1_f0, g1_f1, g1_c = grad1
    h0, h1, _ = coeffs.spacings
    F0 = coeffs.a11 * g0_f0
    F1 = coeffs.a22 * g1_f1
    if coeffs.periodic0:
        out = -(F0 - np.roll(F0, 1, axis=0)) / h0
    else:
        n0 = coeffs.a11.shape[0] + 1
        out = np.zeros((n0,) + coeffs.a11.shape[1:])
        out[1:-1] = -(F0[1:] - F0[:-1]) / h0
    out -= _scatter_axis1(F1) / h1
    if coeffs.a12 is not None:
        add = _scatter_cells(coeffs.a12 * g1_c, coeffs.a12 * g0_c, coeffs)
        if coeffs.periodic0:
            out += add
        else:
            out[1:-1] += add[1:-1]
    return out


def backward_time_diff(u: np.ndarray, tau: float) -> np.ndarray:
    """Backward difference in the periodic time axis (last axis)."""
    return (u - np.roll(u, 1, axis=-1)) / tau


def grad_central(u: np.ndarray, spacings, periodic0: bool):
    """Central gradient (all 3 axes); one-sided at Dirichlet axial ends."""
    h0, h1, tau = spacings
    if periodic0:
        g0 = (np.roll(u, -1, axis=0) - np.roll(u, 1, axis=0)) / (2 * h0)
    else:
        g0 = np.empty_like(u)
        g0[1:-1] = (u[2:] - u[:-2]) / (2 * h0)
        g0[0] = (u[1] - u[0]) / h0
        g0[-1] = (u[-1] - u[-2]) / h0
    g1 = (np.roll(u, -1, axis=1) - np.roll(u, 1, axis=1)) / (2 * h1)
    g2 = (np.roll(u, -1, axis=2) - np.roll(u, 1, axis=2)) / (2 * tau)
    return g0, g1, g2


# ---------------------------------------------------------------------------
# sparse assembly
# ---------------------------------------------------------------------------

@dataclass
class SparseSystem:
    """Sparse linear system with optional zero-mean (constant-nullspace) flag."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    shape3: tuple
    symmetric: bool = False
    zero_mean: bool = False
    interior: Optional[np.ndarray] = None  # bool mask, None = all interior
    preconditioner: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def _coo_pairs(rows, cols, vals, r, c, v):
    rows.append(r)
    cols.append(c)
    vals.append(v)


def _flat_index(shape):
    n0, n1, n2 = shape
    def idx(i0, i1, i2):
        return (i0 * n1 + i1) * n2 + i2
    return idx


def _divform_entries(coeffs: StaggeredCoefficients, shape):
    """COO triplets of the spatial divergence-form operator (node-normalized)."""
    n0, n1, n2 = shape
    h0, h1, _ = coeffs.spacings
    idx = _flat_index(shape)
    I0, I1, I2 = np.meshgrid(
        np.arange(n0), np.arange(n1), np.arange(n2), indexing="ij"
    )
    rows, cols, vals = [], [], []

    # axis 0 faces
    if coeffs.periodic0:
        p = idx(I0, I1, I2)
        q = idx((I0 + 1) % n0, I1, I2)
        c = (coeffs.a11 / h0**2).ravel()
    else:
        p = idx(I0[:-1], I1[:-1], I2[:-1])
        q = idx(I0[:-1] + 1, I1[:-1], I2[:-1])
        c = (coeffs.a11 / h0**2).ravel()
    p, q = p.ravel(), q.ravel()
    for r, cc, v in ((p, p, c), (q, q, c), (p, q, -c), (q, p, -c)):
        _coo_pairs(rows, cols, vals, r, cc, v)

    # axis 1 faces (always periodic in this package)
    p = idx(I0, I1, I2).ravel()
    q = idx(I0, (I1 + 1) % n1, I2).ravel()
    c = (coeffs.a22 / h1**2).ravel()
    for r, cc, v in ((p, p, c), (q, q, c), (p, q, -c), (q, p, -c)):
        _coo_pairs(rows, cols, vals, r, cc, v)

    # mixed term via cell-averaged gradients
    if coeffs.a12 is not None:
        if coeffs.periodic0:
            C0, C1, C2 = I0, I1, I2
            wrap0 = lambda i: i % n0
        else:
            C0, C1, C2 = I0[:-1], I1[:-1], I2[:-1]
            wrap0 = lambda i: i
        a12 = coeffs.a12.ravel()
        corners = [(0, 0), (1, 0), (0, 1), (1, 1)]
        w0 = {(0, 0): -1, (1, 0): 1, (0, 1): -1, (1, 1): 1}
        w1 = {(0, 0): -1, (1, 0): -1, (0, 1): 1, (1, 1): 1}
        nodes = {
            d: idx(wrap0(C0 + d[0]), (C1 + d[1]) % n1, C2).ravel() for d in corners
        }
        for da in corners:
            for db in corners:
                w = (
                    w0[da] * w1[db] + w1[da] * w0[db]
                ) / (4.0 * h0 * h1)
                _coo_pairs(rows, cols, vals, nodes[db], nodes[da], a12 * w)
    return rows, cols, vals


def _time_entries(shape, tau):
    n0, n1, n2 = shape
    idx = _flat_index(shape)
    I0, I1, I2 = np.meshgrid(
        np.arange(n0), np.arange(n1), np.arange(n2), indexing="ij"
    )
    p = idx(I0, I1, I2).ravel()
    pm = idx(I0, I1, (I2 - 1) % n2).ravel()
    ones = np.full(p.shape, 1.0 / tau)
    return [p, p], [p, pm], [ones, -ones]


def _boundary_mask(shape, periodic0: bool) -> Optional[np.ndarray]:
    if periodic0:
        return None
    n0, n1, n2 = shape
    mask = np.zeros(shape, dtype=bool)
    mask[0] = True
    mask[-1] = True
    return mask.ravel()


def _finalize_matrix(rows, cols, vals, n, boundary: Optional[np.ndarray]):
    rows = np.concatenate([np.asarray(r).ravel() for r in rows])
    cols = np.concatenate([np.asarray(c).ravel() for c in cols])
    vals = np.concatenate([np.asarray(v).ravel() for v in vals])
    if boundary is not None:
        keep = ~(boundary[rows] | boundary[cols])
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        bidx = np.nonzero(boundary)[0]
        rows = np.concatenate([rows, bidx])
        cols = np.concatenate([cols, bidx])
        vals = np.concatenate([vals, np.ones(bidx.size)])
    K = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    return K


def assemble_divergence_form(grid, sampler, zero_mean: bool = False,
                             y1_offset: float = 0.0,
                             with_time: bool = True) -> SparseSystem:
    """Assemble the monolithic space-time operator d_s + L on a torus or
    truncated cylinder (backward Euler in the periodic time axis).

    With with_time=False only the spatial part L is assembled (symmetric).
    The rhs is zeros; callers fill it.  Dirichlet end layers of the cylinder
    become identity rows with their couplings removed, so symmetric inputs
    yield exactly symmetric matrices.
    """
    diagonal = bool(getattr(sampler, "diagonal", False))
    coeffs = sample_staggered(grid, sampler, diagonal=diagonal,
                              y1_offset=y1_offset)
    shape = grid.shape
    rows, cols, vals = _divform_entries(coeffs, shape)
    if with_time:
        tr, tc, tv = _time_entries(shape, grid.tau)
        rows += tr
        cols += tc
        vals += tv
    boundary = _boundary_mask(shape, coeffs.periodic0)
    K = _finalize_matrix(rows, cols, vals, grid.n_nodes, boundary)
    precond = spectral_preconditioner(grid, coeffs, with_time=with_time)
    return SparseSystem(
        matrix=K,
        rhs=np.zeros(grid.n_nodes),
        shape3=shape,
        symmetric=not with_time,
        zero_mean=zero_mean,
        interior=None if boundary is None else ~boundary,
        preconditioner=precond,
    )


def assemble_laplacian_d1(grid, zero_mean: bool = True) -> SparseSystem:
    """The (d+1)-dimensional Laplacian (time treated as a coordinate) on a
    torus or cylinder, with the same 7-point flux-form stencil."""
    if isinstance(grid, TorusGrid):
        periodic0 = True
        n0 = grid.n_space
    else:
        periodic0 = False
        n0 = grid.n_axial
    shape = grid.shape
    h0 = h1 = grid.h
    tau = grid.tau
    idx = _flat_index(shape)
    n1, n2 = shape[1], shape[2]
    I0, I1, I2 = np.meshgrid(
        np.arange(n0), np.arange(n1), np.arange(n2), indexing="ij"
    )
    rows, cols, vals = [], [], []
    # axis 0
    if periodic0:
        p = idx(I0, I1, I2).ravel()
        q = idx((I0 + 1) % n0, I1, I2).ravel()
        c = np.full(p.shape, 1.0 / h0**2)
    else:
        p = idx(I0[:-1], I1[:-1], I2[:-1]).ravel()
        q = idx(I0[:-1] + 1, I1[:-1], I2[:-1]).ravel()
        c = np.full(p.shape, 1.0 / h0**2)
    for r, cc, v in ((p, p, c), (q, q, c), (p, q, -c), (q, p, -c)):
        _coo_pairs(rows, cols, vals, r, cc, v)
    # axis 1 and time axis, both periodic
    for axis, spacing in ((1, h1), (2, tau)):
        shift = [I0, I1, I2]
        shift[axis] = (shift[axis] + 1) % shape[axis]
        p = idx(I0, I1, I2).ravel()
        q = idx(*shift).ravel()
        c = np.full(p.shape, 1.0 / spacing**2)
        for r, cc, v in ((p, p, c), (q, q, c), (p, q, -c), (q, p, -c)):
            _coo_pairs(rows, cols, vals, r, cc, v)
    boundary = _boundary_mask(shape, periodic0)
    K = _finalize_matrix(rows, cols, vals, grid.n_nodes, boundary)
    symbols = (
        _axis_symbol(n0, h0, periodic0),
        _axis_symbol(n1, h1, True),
        _axis_symbol(n2, tau, True),
    )
    precond = _SpectralSolve(shape, symbols, None, periodic0)
    return SparseSystem(
        matrix=K,
        rhs=np.zeros(grid.n_nodes),
        shape3=shape,
        symmetric=True,
        zero_mean=zero_mean and periodic0,
        interior=None if boundary is None else ~boundary,
        preconditioner=precond,
    )


def apply_laplacian_d1(u: np.ndarray, grid) -> np.ndarray:
    """Matrix-free application of the 7-point (d+1)-Laplacian stencil."""
    periodic0 = isinstance(grid, TorusGrid)
    h2, tau2 = grid.h ** 2, grid.tau ** 2
    out = (np.roll(u, -1, 1) - 2 * u + np.roll(u, 1, 1)) / h2
    out += (np.roll(u, -1, 2) - 2 * u + np.roll(u, 1, 2)) / tau2
    if periodic0:
        out += (np.roll(u, -1, 0) - 2 * u + np.roll(u, 1, 0)) / h2
    else:
        mid = np.zeros_like(u)
        mid[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / h2
        out += mid
        out[0] = 0.0
        out[-1] = 0.0
    return -out


# ---------------------------------------------------------------------------
# spectral (constant-coefficient) preconditioner
# ---------------------------------------------------------------------------

def _axis_symbol(n, spacing, periodic):
    if periodic:
        k = np.arange(n)
        return (2.0 - 2.0 * np.cos(2.0 * np.pi * k / n)) / spacing**2
    m = n - 2  # interior nodes
    k = np.arange(1, m + 1)
    return (2.0 - 2.0 * np.cos(np.pi * k / (m + 1))) / spacing**2


class _SpectralSolve:
    """Inverse of the constant-coefficient symbol on the grid's spectrum.

    Periodic axes use FFT, the Dirichlet axial axis DST-I on interior nodes;
    behaves as identity on the two Dirichlet end layers.
    """

    def __init__(self, shape, symbols, time_tau, periodic0,
                 weights=(1.0, 1.0, 1.0)):
        self.shape = shape
        self.periodic0 = periodic0
        s0, s1, s2 = symbols
        sym = (
            weights[0] * s0[:, None, None]
            + weights[1] * s1[None, :, None]
        )
        if time_tau is not None:
            m = np.arange(shape[2])
            tsym = (1.0 - np.exp(-2j * np.pi * m / shape[2])) / time_tau
            sym = sym + tsym[None, None, :]
        else:
            sym = sym + weights[2] * s2[None, None, :]
        sym = np.asarray(sym, dtype=complex)
        sym[np.abs(sym) < 1e-14] = 1.0
        self.inv_symbol = 1.0 / sym

    def __call__(self, r: np.ndarray) -> np.ndarray:
        u = r.reshape(self.shape)
        if self.periodic0:
            uh = sfft.fftn(u, axes=(0, 1, 2))
            uh *= self.inv_symbol
            return np.real(sfft.ifftn(uh, axes=(0, 1, 2))).ravel()
        out = u.copy()
        inner = u[1:-1]
        uh = sfft.fftn(inner, axes=(1, 2))
        uh = sfft.dst(uh, type=1, axis=0)
        uh *= self.inv_symbol
        uh = sfft.idst(uh, type=1, axis=0)
        out[1:-1] = np.real(sfft.ifftn(uh, axes=(1, 2)))
        return out.ravel()


def spectral_preconditioner(grid, coeffs: StaggeredCoefficients,
                            with_time: bool) -> _SpectralSolve:
    if isinstance(grid, TorusGrid):
        periodic0 = True
        n0 = grid.n_space
    else:
        periodic0 = False
        n0 = grid.n_axial
    a0 = float(np.mean(coeffs.a11))
    a1 = float(np.mean(coeffs.a22))
    symbols = (
        _axis_symbol(n0, grid.h, periodic0),
        _axis_symbol(grid.n_space, grid.h, True),
        _axis_symbol(grid.n_time, grid.tau, True),
    )
    return _SpectralSolve(
        grid.shape,
        symbols,
        grid.tau if with_time else None,
        periodic0,
        weights=(a0, a1, 0.0),
    )


# ---------------------------------------------------------------------------
# iterative solution
# ---------------------------------------------------------------------------

def _project_mean(x: np.ndarray) -> np.ndarray:
    return x - np.mean(x)


def solve_sparse(system: SparseSystem, tol: float = 1e-10,
                 maxiter: int = 4000, x0: Optional[np.ndarray] = None
                 ) -> np.ndarray:
    """Solve to relative residual <= tol; deterministic for fixed inputs.

    Symmetric systems use preconditioned CG, the nonsymmetric space-time
    blocks a restarted minimal-residual iteration (GMRES).  The true residual
    is always re-verified; zero-mean systems are consistency-checked and the
    solution mean is projected out afterwards.
    """
    K, b = system.matrix, system.rhs
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b)
    if system.zero_mean:
        mean_b = abs(float(np.mean(b)))
        if mean_b > 1e-8 * (bnorm / np.sqrt(b.size)):
            raise SolverError(
                "inconsistent singular system: right-hand side has nonzero mean",
                residual=mean_b * np.sqrt(b.size) / bnorm,
            )
        b = _project_mean(b)

    M = None
    if system.preconditioner is not None:
        M = spla.LinearOperator(K.shape, matvec=system.preconditioner)
    else:
        d = K.diagonal()
        dinv = np.where(np.abs(d) > 0, 1.0 / np.where(d == 0, 1.0, d), 1.0)
        M = spla.LinearOperator(K.shape, matvec=lambda r: dinv * r)

    x = np.zeros_like(b) if x0 is None else x0.copy()
    rtol_target = tol
    for attempt in range(4):
        if system.symmetric:
            x, info = spla.cg(K, b, x0=x, rtol=rtol_target, atol=0.0,
                              maxiter=maxiter, M=M)
        else:
            x, info = spla.gmres(K, b, x0=x, rtol=rtol_target, atol=0.0,
                                 restart=100, maxiter=max(1, maxiter // 100),
                                 M=M)
        res = float(np.linalg.norm(b - K @ x)) / bnorm
        if res <= tol:
            if system.zero_mean:
                x = _project_mean(x)
            return x
        rtol_target *= 0.02
        if rtol_target < 1e-16:
            break
    raise SolverError("iterative solver did not converge", residual=res)


# ---------------------------------------------------------------------------
# box marching: implicit step systems
# ---------------------------------------------------------------------------

def box_spatial_coefficients(grid: BoxTimeGrid, sampler, t: float, eps: float,
                             diagonal: bool) -> StaggeredCoefficients:
    """Staggered samples of A(x / eps, t / eps^2) on the box at time t.

    With eps = 0 the sampler is evaluated at (x, t) directly (homogenized
    solves with a piecewise-constant matrix).
    """
    x = grid.space_coords()
    h = grid.h
    if eps > 0:
        xs = x / eps
        fs = (x[:-1] + 0.5 * h) / eps
        ts = np.asarray(t / eps**2)
    else:
        xs = x
        fs = x[:-1] + 0.5 * h
        ts = np.asarray(t)
    a11_f, a22_f, a12_f = _eval_tensor(
        sampler, fs[:, None, None], xs[None, :, None], ts[None, None, None]
    )
    _check_elliptic(a11_f, a22_f, a12_f)
    a11 = a11_f[..., 0]
    a11 = a11[:, :, None]
    a11_g, a22_g, _ = _eval_tensor(
        sampler, xs[:, None, None], fs[None, :, None], ts[None, None, None]
    )
    a22 = a22_g[..., 0][:, :, None]
    a12 = None
    if not diagonal:
        _, _, a12c = _eval_tensor(
            sampler, fs[:, None, None], fs[None, :, None], ts[None, None, None]
        )
        if np.any(a12c != 0.0):
            a12 = a12c[..., 0][:, :, None]
    # reuse the 3-D machinery with a singleton time axis
    return StaggeredCoefficients(
        a11[:, :, :], a22, a12, (h, h, grid.tau), periodic0=False
    )


class _BoxStencil:
    """Implicit-step operator (I/tau + L) on box nodes with the Dirichlet ring.

    Matrix-free application plus a CSR copy for the CG path.  The axis1
    direction of the box is NOT periodic, unlike the cylinder machinery, so
    fluxes are formed directly here.
    """

    def __init__(self, grid: BoxTimeGrid, coeffs: StaggeredCoefficients):
        self.grid = grid
        self.h = grid.h
        self.tau = grid.tau
        self.a11 = coeffs.a11[:, :, 0]  # (n-1, n)
        self.a22 = coeffs.a22[:, :, 0]  # (n, n-1)
        self.a12 = None if coeffs.a12 is None else coeffs.a12[:, :, 0]
        self._csr = None

    def apply_L(self, u: np.ndarray) -> np.ndarray:
        """Spatial operator; boundary ring rows return 0."""
        h = self.h
        F0 = self.a11 * (u[1:, :] - u[:-1, :]) / h
        F1 = self.a22 * (u[:, 1:] - u[:, :-1]) / h
        out = np.zeros_like(u)
        out[1:-1, :] -= (F0[1:, :] - F0[:-1, :]) / h
        out[:, 1:-1] -= (F1[:, 1:] - F1[:, :-1]) / h
        if self.a12 is not None:
            g0 = (u[1:, 1:] + u[1:, :-1] - u[:-1, 1:] - u[:-1, :-1]) / (2 * h)
            g1 = (u[1:, 1:] - u[1:, :-1] + u[:-1, 1:] - u[:-1, :-1]) / (2 * h)
            P = self.a12 * g1
            Q = self.a12 * g0
            add = np.zeros_like(u)
            for d0 in (0, 1):
                for d1 in (0, 1):
                    w0 = (2 * d0 - 1) / (2 * h)
                    w1 = (2 * d1 - 1) / (2 * h)
                    sl0 = slice(d0, u.shape[0] - 1 + d0)
                    sl1 = slice(d1, u.shape[1] - 1 + d1)
                    add[sl0, sl1] += P * w0 + Q * w1
            out += add
        out[0, :] = 0.0
        out[-1, :] = 0.0
        out[:, 0] = 0.0
        out[:, -1] = 0.0
        return out

    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = self._assemble_csr()
        return self._csr

    def _assemble_csr(self) -> sp.csr_matrix:
        n = self.grid.n_nodes
        h = self.h
        idx = lambda i, j: i * n + j
        rows, cols, vals = [], [], []
        interior = np.zeros((n, n), dtype=bool)
        interior[1:-1, 1:-1] = True
        II, JJ = np.meshgrid(np.arange(n - 1), np.arange(n), indexing="ij")
        p = idx(II, JJ).ravel()
        q = idx(II + 1, JJ).ravel()
        c = (self.a11 / h**2).ravel()
        for r, cc, v in ((p, p, c), (q, q, c), (p, q, -c), (q, p, -c)):
            rows.append(r); cols.append(cc); vals.append(v)
        II, JJ = np.meshgrid(np.arange(n), np.arange(n - 1), indexing="ij")
        p = idx(II, JJ).ravel()
        q = idx(II, JJ + 1).ravel()
        c = (self.a22 / h**2).ravel()
        for r, cc, v in ((p, p, c), (q, q, c), (p, q, -c), (q, p, -c)):
            rows.append(r); cols.append(cc); vals.append(v)
        if self.a12 is not None:
            II, JJ = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
            corners = [(0, 0), (1, 0), (0, 1), (1, 1)]
            w0 = {(0, 0): -1, (1, 0): 1, (0, 1): -1, (1, 1): 1}
            w1 = {(0, 0): -1, (1, 0): -1, (0, 1): 1, (1, 1): 1}
            nodes = {d: idx(II + d[0], JJ + d[1]).ravel() for d in corners}
            a12 = self.a12.ravel()
            for da in corners:
                for db in corners:
                    w = (w0[da] * w1[db] + w1[da] * w0[db]) / (4 * h * h)
                    rows.append(nodes[db]); cols.append(nodes[da]); vals.append(a12 * w)
        # time term on interior nodes
        p = np.nonzero(interior.ravel())[0]
        rows.append(p); cols.append(p); vals.append(np.full(p.size, 1.0 / self.tau))
        K = _finalize_matrix(rows, cols, vals, n * n, ~interior.ravel())
        return K


class BoxStepSolver:
    """Backward-Euler step solver on the box.

    Media varying only along x1 (diagonal tensors) take the exact direct
    route: DST-I diagonalization across x2 plus a vectorized tridiagonal
    solve along x1.  Everything else goes through diagonally preconditioned
    CG on the assembled SPD step matrix.
    """

    def __init__(self, grid: BoxTimeGrid, sampler, eps: float,
                 tol: float = 1e-10):
        self.grid = grid
        self.sampler = sampler
        self.eps = eps
        self.tol = tol
        self.direct = bool(getattr(sampler, "x1_structured", False)) and bool(
            getattr(sampler, "diagonal", False)
        )
        self.time_dependent = bool(getattr(sampler, "time_dependent", False))
        self._cache = {}
        self._mode_mu = None

    def _pattern_key(self, t: float):
        if not self.time_dependent:
            return 0
        if self.eps > 0:
            phase = (t / self.eps**2) % 1.0
        else:
            phase = t
        return round(phase * 1e12)

    def step(self, u_prev: np.ndarray, rhs: np.ndarray, t_new: float,
             x0: Optional[np.ndarray] = None) -> np.ndarray:
        """Solve (I/tau + L(t_new)) u = u_prev/tau + rhs, zero Dirichlet ring."""
        b = u_prev / self.grid.tau + rhs
        b[0, :] = 0.0
        b[-1, :] = 0.0
        b[:, 0] = 0.0
        b[:, -1] = 0.0
        key = self._pattern_key(t_new)
        if self.direct:
            fac = self._cache.get(key)
            if fac is None:
                fac = self._factor_direct(t_new)
                if len(self._cache) < 16:
                    self._cache[key] = fac
            return self._solve_direct(fac, b)
        entry = self._cache.get(key)
        if entry is None:
            coeffs = box_spatial_coefficients(
                self.grid, self.sampler, t_new, self.eps,
                bool(getattr(self.sampler, "diagonal", False)),
            )
            st = _BoxStencil(self.grid, coeffs)
            K = st.csr()
            d = K.diagonal()
            dinv = 1.0 / d
            entry = (K, dinv)
            if len(self._cache) < 16:
                self._cache[key] = entry
        K, dinv = entry
        n = self.grid.n_nodes
        M = spla.LinearOperator(K.shape, matvec=lambda r: dinv * r)
        guess = (x0 if x0 is not None else u_prev).ravel()
        x, info = spla.cg(K, b.ravel(), x0=guess, rtol=self.tol, atol=0.0,
                          maxiter=4000, M=M)
        res = float(np.linalg.norm(b.ravel() - K @ x))
        scale = float(np.linalg.norm(b))
        if scale > 0 and res / scale > 10 * self.tol:
            raise SolverError("implicit step CG failed", residual=res / scale)
        out = x.reshape(u_prev.shape)
        return out

    # -- direct transverse-diagonalized path --------------------------------

    def _factor_direct(self, t: float):
        grid = self.grid
        n = grid.n_nodes
        h = grid.h
        x = grid.space_coords()
        if self.eps > 0:
            xf = (x[:-1] + 0.5 * h) / self.eps
            xc = x / self.eps
            ts = t / self.eps**2
        else:
            xf, xc, ts = x[:-1] + 0.5 * h, x, t
        zero = np.zeros(1)
        a11_f, a22_f, _ = _eval_tensor(
            self.sampler, xf[:, None, None], zero[None, :, None],
            np.asarray(ts)[None, None, None])
        a11 = a11_f[:, 0, 0]
        a11_c, a22_c, _ = _eval_tensor(
            self.sampler, xc[:, None, None], zero[None, :, None],
            np.asarray(ts)[None, None, None])
        a22 = a22_c[:, 0, 0]
        m = n - 2
        mu = (2.0 - 2.0 * np.cos(np.pi * np.arange(1, m + 1) / (m + 1))) / h**2
        # tridiagonal blocks over x1 interior nodes i = 1..n-2, one per mode;
        # interior row j corresponds to node j+1, its left face is a11[j]
        lower = -a11[:-1] / h**2           # row j -> col j-1 (j >= 1)
        upper = -a11[1:] / h**2            # row j -> col j+1 (j <= m-2)
        diag_base = 1.0 / grid.tau + (a11[:-1] + a11[1:])[:, None] / h**2
        diag = diag_base + a22[1:-1][:, None] * mu[None, :]
        # Thomas factorization vectorized across modes
        cp = np.empty((m, len(mu)))
        denom = np.empty((m, len(mu)))
        denom[0] = diag[0]
        cp[0] = upper[0] / denom[0]
        for i in range(1, m):
            denom[i] = diag[i] - lower[i] * cp[i - 1]
            cp[i] = upper[i] / denom[i]
        return (lower, cp, denom)

    def _solve_direct(self, fac, b: np.ndarray) -> np.ndarray:
        lower, cp, denom = fac
        m = b.shape[0] - 2
        inner = b[1:-1, 1:-1]
        bh = sfft.dst(inner, type=1, axis=1)
        y = np.empty_like(bh)
        y[0] = bh[0] / denom[0]
        for i in range(1, m):
            y[i] = (bh[i] - lower[i] * y[i - 1]) / denom[i]
        for i in range(m - 2, -1, -1):
            y[i] -= cp[i] * y[i + 1]
        out = np.zeros_like(b)
        out[1:-1, 1:-1] = sfft.idst(y, type=1, axis=1)
        return out


# ---------------------------------------------------------------------------
# quadrature and norms
# ---------------------------------------------------------------------------

def trapezoid_weights(n: int, spacing: float, periodic: bool = False
                      ) -> np.ndarray:
    w = np.full(n, spacing)
    if not periodic:
        w[0] *= 0.5
        w[-1] *= 0.5
    return w


def space_time_norm(u, p: float) -> float:
    """L^p norm over box x (0, T) by composite trapezoidal quadrature.

    `u` must expose .values with shape (n_steps+1, n, n) and .grid
    (a BoxTimeGrid); p >= 1.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    grid = u.grid
    wt = trapezoid_weights(grid.n_steps + 1, grid.tau)
    wx = trapezoid_weights(grid.n_nodes, grid.h)
    vals = np.abs(np.asarray(u.values)) ** p
    integral = np.einsum("tij,t,i,j->", vals, wt, wx, wx)
    return float(integral ** (1.0 / p))


def linf_l2_norm(u) -> float:
    """sup over time of the spatial L2 norm."""
    grid = u.grid
    wx = trapezoid_weights(grid.n_nodes, grid.h)
    vals = np.asarray(u.values) ** 2
    slices = np.einsum("tij,i,j->t", vals, wx, wx)
    return float(np.sqrt(np.max(slices)))
