"""Periodic parabolic cell problems and effective tensors.

For each medium the corrector chi_j solves the cell problem

    (d_s + L) chi_j = -L(y_j)   on the unit space-time torus,

as one coupled space-time sparse system with periodic time wrap (exact
discrete time-periodicity, no marching to an attractor), normalized to zero
mean.  The effective tensor is the torus average of the flux A (e_j + grad
chi_j), evaluated with the same staggered samples and stencil gradients used
in assembly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import PeriodicCoefficientField
from .fields import TorusField
from .grids import TorusGrid
from . import numerics as nm


def _is_diag(A) -> bool:
    return bool(getattr(A, "diagonal", False))


class EffectiveTensorError(ValueError):
    """Raised when a computed tensor violates symmetry or spectrum bounds."""


@dataclass(frozen=True)
class EffectiveTensor:
    """Constant 2x2 homogenized matrix with declared ellipticity bounds."""

    matrix: np.ndarray
    kappa: float

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (2, 2):
            raise EffectiveTensorError(f"expected 2x2 matrix, got {m.shape}")
        asym = abs(m[0, 1] - m[1, 0])
        if asym > 1e-10 * max(1.0, float(np.max(np.abs(m)))):
            raise EffectiveTensorError(f"tensor not symmetric: |A12-A21|={asym:.3e}")
        eigs = np.linalg.eigvalsh(0.5 * (m + m.T))
        slack = 1e-8
        if eigs[0] < self.kappa - slack or eigs[-1] > 1.0 / self.kappa + slack:
            raise EffectiveTensorError(
                f"tensor spectrum {eigs} escapes [{self.kappa}, {1/self.kappa}]"
            )
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __getitem__(self, key):
        return self.matrix[key]


@dataclass(frozen=True)
class CellSolution:
    """Correctors and effective tensor of one periodic medium."""

    field: PeriodicCoefficientField
    grid: TorusGrid
    chi: tuple  # (TorusField, TorusField) for j = 1, 2
    tensor: EffectiveTensor
    residuals: tuple
    tol: float


def cell_rhs(coeffs: nm.StaggeredCoefficients, j: int) -> np.ndarray:
    """-L(y_j) = div(A e_j) evaluated through the assembly stencil."""
    grad = (1.0, 0.0) if j == 1 else (0.0, 1.0)
    return -nm.apply_to_affine(coeffs, grad[0], grad[1])


def solve_cell_problem(A: PeriodicCoefficientField, j: int, grid: TorusGrid,
                       tol: float = 1e-10) -> TorusField:
    """Solve the cell problem for axis j (1-based) on the given torus grid."""
    if j not in (1, 2):
        raise ValueError(f"axis index j must be 1 or 2, got {j}")
    if hasattr(A, "validate_on"):
        A.validate_on(grid)
    system = nm.assemble_divergence_form(grid, A, zero_mean=True)
    coeffs = nm.sample_staggered(grid, A, diagonal=_is_diag(A))
    rhs = cell_rhs(coeffs, j)
    if np.max(np.abs(rhs)) == 0.0:
        return TorusField(grid=grid, values=np.zeros(grid.shape))
    system.rhs = rhs.ravel()
    x = nm.solve_sparse(system, tol=tol)
    return TorusField(grid=grid, values=x.reshape(grid.shape))


def flux_average(coeffs: nm.StaggeredCoefficients, chi: np.ndarray,
                 j: int) -> np.ndarray:
    """Torus average of A (e_j + grad chi_j) using the assembly's samples."""
    g = (1.0, 0.0) if j == 1 else (0.0, 1.0)
    h0, h1, _ = coeffs.spacings
    d0 = (np.roll(chi, -1, axis=0) - chi) / h0
    d1 = (np.roll(chi, -1, axis=1) - chi) / h1
    f1 = float(np.mean(coeffs.a11 * (g[0] + d0)))
    f2 = float(np.mean(coeffs.a22 * (g[1] + d1)))
    if coeffs.a12 is not None:
        g0c, g1c = nm._cell_gradients(chi, coeffs)
        f1 += float(np.mean(coeffs.a12 * (g[1] + g1c)))
        f2 += float(np.mean(coeffs.a12 * (g[0] + g0c)))
    return np.array([f1, f2])


def effective_tensor(A: PeriodicCoefficientField, chi: tuple,
                     grid: TorusGrid) -> EffectiveTensor:
    """Homogenized matrix: columns are flux averages of the two correctors."""
    coeffs = nm.sample_staggered(grid, A, diagonal=_is_diag(A))
    cols = [flux_average(coeffs, chi[j].values, j + 1) for j in range(2)]
    m = np.column_stack(cols)
    return EffectiveTensor(matrix=m, kappa=getattr(A, "kappa", 1e-12))


def solve_cell_problems(A: PeriodicCoefficientField, grid: TorusGrid,
                        tol: float = 1e-10) -> CellSolution:
    """Both correctors plus the effective tensor, with residual bookkeeping."""
    chi = tuple(solve_cell_problem(A, j, grid, tol=tol) for j in (1, 2))
    system = nm.assemble_divergence_form(grid, A, zero_mean=True)
    coeffs = nm.sample_staggered(grid, A, diagonal=_is_diag(A))
    residuals = []
    for j in (1, 2):
        rhs = cell_rhs(coeffs, j).ravel()
        scale = float(np.linalg.norm(rhs))
        if scale == 0.0:
            residuals.append(0.0)
            continue
        r = rhs - system.matrix @ chi[j - 1].values.ravel()
        residuals.append(float(np.linalg.norm(r)) / scale)
    tensor = effective_tensor(A, chi, grid)
    return CellSolution(
        field=A, grid=grid, chi=chi, tensor=tensor,
        residuals=tuple(residuals), tol=tol,
    )
