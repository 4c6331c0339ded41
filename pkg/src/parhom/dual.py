"""Dual (flux) correctors: periodic and interface variants.

The potentials f_Ij solve (d+1)-dimensional Poisson problems whose right-hand
sides are the flux discrepancies B_Ij; the antisymmetrized gradients
phi_KIj = d_K f_Ij - d_I f_Kj then reproduce B as a divergence.  Two sign
conventions coexist and are tagged: the periodic one (B = A + A grad chi -
A_hat) and the interface one (B = A_hat grad P - A (grad P + grad chi)).

On the cylinder the scalar Poisson solves are routed by source type: sources
supported in |y1| <= 1 go through a zero-Dirichlet solve at +-R; decaying
sources are split into a transverse average (integrated twice along the
axis) plus a mean-free remainder solved slice-by-slice in the transverse
torus and then re-solved in divergence form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .cell import CellSolution
from .coefficients import TwoSidedField
from .corrector import CorrectorSolution, CutoffPair, wrap_to_cylinder
from .grids import CylinderGrid, TorusGrid
from .interface import InterfaceProfile, piecewise_gradient_samples
from . import numerics as nm


class DualError(RuntimeError):
    """Raised for mean violations, support violations, or missing inputs."""


@dataclass(frozen=True)
class FluxField:
    """B_Ij stack (I = 1..d+1, j = 1..d) with its sign-convention tag."""

    values: np.ndarray  # (3, 2, *grid.shape)
    convention: str     # "periodic" or "interface"

    def __post_init__(self):
        if self.convention not in ("periodic", "interface"):
            raise DualError(f"unknown flux convention {self.convention!r}")


@dataclass
class DualCorrectorSet:
    """Potentials f_Ij, antisymmetric phi_KIj, and their flux field."""

    grid: object
    f: np.ndarray        # (3, 2, *shape)
    phi: np.ndarray      # (3, 3, 2, *shape)
    B: FluxField
    divergence_residuals: dict
    diagnostics: dict


# ---------------------------------------------------------------------------
# node-centered flux components (shared by both conventions)
# ---------------------------------------------------------------------------

def _avg_faces0_to_nodes(F, periodic0):
    if periodic0:
        return 0.5 * (F + np.roll(F, 1, axis=0))
    out = np.empty((F.shape[0] + 1,) + F.shape[1:])
    out[1:-1] = 0.5 * (F[1:] + F[:-1])
    out[0] = F[0]
    out[-1] = F[-1]
    return out


def _avg_faces1_to_nodes(F):
    return 0.5 * (F + np.roll(F, 1, axis=1))


def _avg_cells_to_nodes(C, periodic0):
    C1 = 0.5 * (C + np.roll(C, 1, axis=1))
    if periodic0:
        return 0.5 * (C1 + np.roll(C1, 1, axis=0))
    out = np.empty((C.shape[0] + 1,) + C.shape[1:])
    out[1:-1] = 0.5 * (C1[1:] + C1[:-1])
    out[0] = C1[0]
    out[-1] = C1[-1]
    return out


def node_flux_components(coeffs: nm.StaggeredCoefficients, u, grad0=0.0,
                         grad1=0.0):
    """(A (g + grad u))_1,2 averaged to nodes from the staggered samples.

    grad0/grad1 follow the apply_to_affine convention: scalars or triplets of
    arrays at (axis0 faces, axis1 faces, cells).
    """
    h0, h1, _ = coeffs.spacings
    if np.isscalar(grad0):
        g0_f0 = g0_f1 = g0_c = float(grad0)
    else:
        g0_f0, g0_f1, g0_c = grad0
    if np.isscalar(grad1):
        g1_f0 = g1_f1 = g1_c = float(grad1)
    else:
        g1_f0, g1_f1, g1_c = grad1

    if coeffs.periodic0:
        d0 = (np.roll(u, -1, axis=0) - u) / h0
    else:
        d0 = (u[1:] - u[:-1]) / h0
    d1 = (np.roll(u, -1, axis=1) - u) / h1

    F0 = coeffs.a11 * (g0_f0 + d0)
    F1 = coeffs.a22 * (g1_f1 + d1)
    flux1 = _avg_faces0_to_nodes(F0, coeffs.periodic0)
    flux2 = _avg_faces1_to_nodes(F1)
    if coeffs.a12 is not None:
        c0, c1 = nm._cell_gradients(u, coeffs)
        flux1 = flux1 + _avg_cells_to_nodes(
            coeffs.a12 * (g1_c + c1), coeffs.periodic0
        )
        flux2 = flux2 + _avg_cells_to_nodes(
            coeffs.a12 * (g0_c + c0), coeffs.periodic0
        )
    return flux1, flux2


def _phi_from_potentials(f: np.ndarray, spacings, periodic0: bool
                         ) -> np.ndarray:
    """phi[K, I, j] = d_K f[I, j] - d_I f[K, j]; exact antisymmetry."""
    shape = f.shape[2:]
    grads = np.empty((3, 3, 2) + shape)
    for I in range(3):
        for j in range(2):
            g = nm.grad_central(f[I, j], spacings, periodic0)
            for K in range(3):
                grads[K, I, j] = g[K]
    phi = np.empty_like(grads)
    for K in range(3):
        for I in range(3):
            phi[K, I] = grads[K, I] - grads[I, K]
    return phi


def _divergence_of_phi(phi: np.ndarray, spacings, periodic0: bool
                       ) -> np.ndarray:
    """sum_K d_K phi[K, I, j] for each (I, j)."""
    shape = phi.shape[3:]
    out = np.zeros((3, 2) + shape)
    for I in range(3):
        for j in range(2):
            for K in range(3):
                g = nm.grad_central(phi[K, I, j], spacings, periodic0)
                out[I, j] += g[K]
    return out


# ---------------------------------------------------------------------------
# periodic dual correctors
# ---------------------------------------------------------------------------

def periodic_dual(A, cells: CellSolution, tol: float = 1e-11
                  ) -> DualCorrectorSet:
    """Antisymmetric potentials of one periodic medium (torus solves).

    B_ij = (A (e_j + grad chi_j))_i - A_hat_ij at nodes (face fluxes averaged
    node-ward, so the discrete mean vanishes exactly), B_(d+1)j = -chi_j.
    """
    grid = cells.grid
    coeffs = nm.sample_staggered(grid, A, diagonal=getattr(A, "diagonal", False))
    shape = grid.shape
    B = np.empty((3, 2) + shape)
    for j in (1, 2):
        g = (1.0, 0.0) if j == 1 else (0.0, 1.0)
        f1, f2 = node_flux_components(coeffs, cells.chi[j - 1].values, g[0], g[1])
        B[0, j - 1] = f1 - cells.tensor.matrix[0, j - 1]
        B[1, j - 1] = f2 - cells.tensor.matrix[1, j - 1]
        B[2, j - 1] = -cells.chi[j - 1].values

    scale = max(float(np.max(np.abs(B))), float(np.max(np.abs(cells.tensor.matrix))))
    for I in range(3):
        for j in range(2):
            m = abs(float(np.mean(B[I, j])))
            if m > 1e-11 * scale:
                raise DualError(
                    f"flux discrepancy B_({I+1},{j+1}) has nonzero mean "
                    f"{m:.3e}; cannot solve the periodic potential problem"
                )

    # assemble_laplacian_d1 builds the positive operator -Laplacian, so the
    # potential equation Laplacian f = B is solved with the negated source
    system = nm.assemble_laplacian_d1(grid, zero_mean=True)
    f = np.empty((3, 2) + shape)
    for I in range(3):
        for j in range(2):
            rhs = -(B[I, j] - np.mean(B[I, j]))
            if np.max(np.abs(rhs)) == 0.0:
                f[I, j] = 0.0
                continue
            sol = nm.solve_sparse(_with_rhs(system, rhs.ravel()), tol=tol)
            f[I, j] = sol.reshape(shape)

    spacings = (grid.h, grid.h, grid.tau)
    phi = _phi_from_potentials(f, spacings, periodic0=True)
    div = _divergence_of_phi(phi, spacings, periodic0=True)
    residuals = {
        (I + 1, j + 1): float(np.max(np.abs(div[I, j] - B[I, j])))
        for I in range(3) for j in range(2)
    }
    return DualCorrectorSet(
        grid=grid, f=f, phi=phi,
        B=FluxField(values=B, convention="periodic"),
        divergence_residuals=residuals,
        diagnostics={"tol": tol},
    )


def _with_rhs(system, rhs):
    import dataclasses

    return dataclasses.replace(system, rhs=rhs)


# ---------------------------------------------------------------------------
# cylinder Poisson with source splitting
# ---------------------------------------------------------------------------

def poisson_cylinder_split(g: np.ndarray, grid: CylinderGrid, kind: str,
                           tol: float = 1e-11, return_parts: bool = False):
    """Solve Laplacian_(d+1) u = g on the truncated cylinder.

    kind="compact": g must vanish outside |y1| <= 1; zero-Dirichlet solve.
    kind="integrable": split g = f1(y1) + f2 with f1 the transverse average;
    f1 is integrated twice along the axis, f2 is solved slice-by-slice in the
    transverse torus and re-solved in divergence form with Dirichlet ends.
    """
    if g.shape != grid.shape:
        raise DualError(f"source shape {g.shape} != grid shape {grid.shape}")
    y1 = grid.axial_coords()
    if kind == "compact":
        sel = np.abs(y1) > 1.0
        if np.any(sel):
            bad = float(np.max(np.abs(g[sel])))
            if bad > 1e-12 * max(1.0, float(np.max(np.abs(g)))):
                raise DualError(
                    f"compact-kind source leaks outside |y1|<=1: {bad:.3e}"
                )
        system = nm.assemble_laplacian_d1(grid, zero_mean=False)
        rhs = -g.copy()
        rhs[0] = 0.0
        rhs[-1] = 0.0
        u = nm.solve_sparse(_with_rhs(system, rhs.ravel()), tol=tol)
        u = u.reshape(grid.shape)
        return (u, None, None, u) if return_parts else u

    if kind != "integrable":
        raise DualError(f"unknown Poisson split kind {kind!r}")

    f1 = np.mean(g, axis=(1, 2))
    # decay sanity: the remainder machinery assumes summable slab energies
    near = np.abs(y1) <= 2.0
    far = np.abs(y1) >= grid.half_length - 1.0
    if np.max(np.abs(g)) > 0:
        far_max = float(np.max(np.abs(g[far])))
        near_max = max(float(np.max(np.abs(g[near]))), 1e-300)
        if far_max > 0.5 * near_max:
            raise DualError(
                "integrable-kind source does not decay along the axis "
                f"(far/near = {far_max / near_max:.3f})"
            )

    # N1: exact discrete double antiderivative of f1 along the axis
    n0 = grid.n_axial
    N1 = np.zeros(n0)
    for i in range(1, n0 - 1):
        N1[i + 1] = 2.0 * N1[i] - N1[i - 1] + grid.h**2 * f1[i]
    N1_full = np.broadcast_to(N1[:, None, None], grid.shape).copy()

    f2 = g - f1[:, None, None]
    # per-slice transverse torus solves (exact for the compact stencil)
    k = np.arange(grid.n_space)
    m = np.arange(grid.n_time)
    sym = (
        (2.0 - 2.0 * np.cos(2.0 * np.pi * k / grid.n_space))[:, None] / grid.h**2
        + (2.0 - 2.0 * np.cos(2.0 * np.pi * m / grid.n_time))[None, :] / grid.tau**2
    )
    sym[0, 0] = 1.0
    # the compact stencil's Fourier symbol is -sym on e^{2 pi i k y}
    fh = sfft.fftn(f2, axes=(1, 2))
    fh[:, 0, 0] = 0.0
    N2 = np.real(sfft.ifftn(fh / (-sym[None, :, :]), axes=(1, 2)))

    # divergence-form re-solve: rhs = div(0, d2 N2, ds N2) from face values
    g1 = (np.roll(N2, -1, axis=1) - N2) / grid.h
    gs = (np.roll(N2, -1, axis=2) - N2) / grid.tau
    rhs = (g1 - np.roll(g1, 1, axis=1)) / grid.h
    rhs += (gs - np.roll(gs, 1, axis=2)) / grid.tau
    rhs = -rhs
    rhs[0] = 0.0
    rhs[-1] = 0.0
    system = nm.assemble_laplacian_d1(grid, zero_mean=False)
    N2t = nm.solve_sparse(_with_rhs(system, rhs.ravel()), tol=tol)
    N2t = N2t.reshape(grid.shape)
    u = N1_full + N2t
    return (u, N1_full, N2, N2t) if return_parts else u


# ---------------------------------------------------------------------------
# interface dual correctors
# ---------------------------------------------------------------------------

def interface_flux_field(A: TwoSidedField, profile: InterfaceProfile,
                         correctors: dict, grid: CylinderGrid) -> FluxField:
    """B_ij = (A grad(P_j + chi_j))_i - (A_hat grad P_j)_i at nodes,
    B_(d+1)j = -chi_j.

    The sign matches the periodic convention contracted with grad P: it is
    the only choice under which sum_I d_I B_Ij = 0 (via the corrector
    equation), which the potential construction needs; the interface tag
    records that P_j replaces y_j, not a sign flip.
    """
    coeffs = nm.sample_staggered(grid, A, diagonal=A.diagonal)
    y1 = grid.axial_coords()
    B = np.empty((3, 2) + grid.shape)
    for j in (1, 2):
        chi = correctors[j].chi.values
        grad0, grad1 = piecewise_gradient_samples(profile, grid, j)
        f1, f2 = node_flux_components(coeffs, chi, grad0, grad1)
        gp = profile.grad_plus[j - 1]
        gm = profile.grad_minus[j - 1]
        hat_p = profile.tensor_plus.matrix @ gp
        hat_m = profile.tensor_minus.matrix @ gm
        side = (y1 > 0)[:, None, None]
        B[0, j - 1] = f1 - np.where(side, hat_p[0], hat_m[0])
        B[1, j - 1] = f2 - np.where(side, hat_p[1], hat_m[1])
        B[2, j - 1] = -chi
    return FluxField(values=B, convention="interface")


def interface_dual(A: TwoSidedField, profile: InterfaceProfile,
                   correctors: dict, cells_plus: CellSolution,
                   cells_minus: CellSolution, duals_plus: DualCorrectorSet,
                   duals_minus: DualCorrectorSet, cutoffs: CutoffPair,
                   grid: CylinderGrid, tol: float = 1e-11
                   ) -> DualCorrectorSet:
    """D-periodic potentials across the interface (three-way source split).

    For every (I, j) the potential decomposes as
    f_Ij = psi_p f_p,Il dP_l + psi_m f_m,Il dP_l + ftilde_Ij, where the
    remainder solves a Poisson problem whose source splits into a compactly
    supported part (interface window plus cutoff-derivative terms) and a
    decaying part routed through the transverse-average machinery.
    """
    for name, obj in (("correctors", correctors), ("duals_plus", duals_plus),
                      ("duals_minus", duals_minus)):
        if obj is None:
            raise DualError(f"missing prerequisite field set: {name}")

    B = interface_flux_field(A, profile, correctors, grid)
    y1 = grid.axial_coords()
    col = y1[:, None, None]
    psi_p = cutoffs.plus(col)
    psi_m = cutoffs.minus(col)
    dpsi_p = cutoffs.plus_d1(col)
    dpsi_m = cutoffs.minus_d1(col)
    ddpsi_p = cutoffs.plus_d2(col)
    ddpsi_m = cutoffs.minus_d2(col)

    spacings = (grid.h, grid.h, grid.tau)
    torus_spacings = (grid.h, grid.h, grid.tau)
    theta = profile.theta

    shape = grid.shape
    f = np.empty((3, 2) + shape)
    m_norms = {}
    sel_d1 = np.abs(y1) <= 1.0
    for I in range(3):
        for j in range(2):
            # periodic potentials combined with the per-side gradient of P_j
            fp = duals_plus.f[I, j] + theta[j] * duals_plus.f[I, 0]
            fm = duals_minus.f[I, j]
            fp_c = wrap_to_cylinder(fp, grid)
            fm_c = wrap_to_cylinder(fm, grid)
            # axial derivative of the periodic potentials (torus-periodic)
            dfp = wrap_to_cylinder(
                nm.grad_central(fp, torus_spacings, True)[0], grid
            )
            dfm = wrap_to_cylinder(
                nm.grad_central(fm, torus_spacings, True)[0], grid
            )
            Bp = wrap_to_cylinder(
                duals_plus.B.values[I, j] + theta[j] * duals_plus.B.values[I, 0],
                grid,
            )
            Bm = wrap_to_cylinder(duals_minus.B.values[I, j], grid)

            Bi = B.values[I, j]
            m1 = (1.0 - psi_p - psi_m) * Bi
            m2 = psi_p * (Bi - Bp) + psi_m * (Bi - Bm)
            m3 = -(ddpsi_p * fp_c + ddpsi_m * fm_c) \
                 - 2.0 * (dpsi_p * dfp + dpsi_m * dfm)
            m_norms[(I + 1, j + 1)] = tuple(
                float(np.sqrt(np.sum(m**2) * grid.cell_volume()))
                for m in (m1, m2, m3)
            )
            ft = poisson_cylinder_split(m1 + m3, grid, "compact", tol=tol)
            ft = ft + poisson_cylinder_split(m2, grid, "integrable", tol=tol)
            fij = psi_p * fp_c + psi_m * fm_c + ft
            f[I, j] = fij - np.mean(fij[sel_d1])

    phi = _phi_from_potentials(f, spacings, periodic0=False)
    div = _divergence_of_phi(phi, spacings, periodic0=False)
    inner = np.abs(y1) <= grid.half_length - 2.0
    residuals = {
        (I + 1, j + 1): float(np.max(np.abs(div[I, j][inner] - B.values[I, j][inner])))
        for I in range(3) for j in range(2)
    }
    return DualCorrectorSet(
        grid=grid, f=f, phi=phi, B=B,
        divergence_residuals=residuals,
        diagnostics={"tol": tol, "source_norms": m_norms},
    )
