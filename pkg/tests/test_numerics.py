"""Tests for the discretization and linear-algebra substrate."""

import numpy as np
import pytest
import scipy.sparse as sp

from parhom import numerics as nm
from parhom.coefficients import make_field
from parhom.fields import SpaceTimeField
from parhom.grids import BoxTimeGrid, CylinderGrid, GridError, TorusGrid


def test_grid_invariants_rejected():
    with pytest.raises(GridError):
        TorusGrid(3, 8)
    with pytest.raises(GridError):
        TorusGrid(8, 7)
    with pytest.raises(GridError):
        CylinderGrid(half_length=0.5, n_space=8, n_time=8)
    with pytest.raises(GridError):
        BoxTimeGrid(half_width=1.0, n_cells=32, final_time=1.0, n_steps=8)


def test_identity_heat_stencil_row_sums():
    # A = I on an 8^3 torus: 7-point space-time heat stencil, zero row sums
    grid = TorusGrid(8, 8)
    system = nm.assemble_divergence_form(grid, make_field("constant"))
    K = system.matrix
    ones = np.ones(K.shape[0])
    assert np.max(np.abs(K @ ones)) == 0.0
    # stencil touches exactly 7 nodes per row (diag merges time+space weights)
    touched = np.diff(K.indptr)
    assert np.all(touched == 6)
    h2 = 1.0 / grid.h ** 2
    expected_diag = 1.0 / grid.tau + 4.0 * h2
    assert np.allclose(K.diagonal(), expected_diag)


def test_flux_uses_face_midpoint_samples():
    # laminate diag(2 + sin 2π y1, 1) applied to the affine field y1
    grid = CylinderGrid(half_length=2.0, n_space=8, n_time=4)
    A = make_field("laminate_diag", axis=1, base=2.0, amplitude=1.0, other=1.0)
    coeffs = nm.sample_staggered(grid, A, diagonal=True)
    y1 = grid.axial_coords()
    u = np.broadcast_to(y1[:, None, None], grid.shape).copy()
    flux = nm._axis0_flux(u, coeffs)
    faces = y1[:-1] + 0.5 * grid.h
    exact = 2.0 + np.sin(2.0 * np.pi * faces)
    assert np.allclose(flux, exact[:, None, None], rtol=0, atol=1e-13)
    # the stencil application reproduces the same divergence on interior rows
    lhs = nm.apply_divergence_form(u, coeffs)
    oracle = np.zeros_like(u)
    oracle[1:-1] = -(exact[1:, None, None] - exact[:-1, None, None]) / grid.h
    assert np.allclose(lhs[1:-1], oracle[1:-1], atol=1e-11)
    # the solve matrix agrees away from the Dirichlet layers (whose couplings
    # are eliminated for zero boundary data)
    system = nm.assemble_divergence_form(grid, A, with_time=False)
    mat = (system.matrix @ u.ravel()).reshape(grid.shape)
    assert np.allclose(mat[2:-2], oracle[2:-2], atol=1e-11)


def test_symmetric_input_gives_exactly_symmetric_matrix():
    grid = TorusGrid(8, 4)
    A = make_field("rotated_frame", base=2.0, amplitude=0.9, other=1.3, angle=0.7)
    system = nm.assemble_divergence_form(grid, A, with_time=False)
    assert (system.matrix - system.matrix.T).nnz == 0
    # cylinder with Dirichlet ends stays exactly symmetric too
    cyl = CylinderGrid(half_length=2.0, n_space=8, n_time=4)
    system = nm.assemble_divergence_form(cyl, A, with_time=False)
    assert (system.matrix - system.matrix.T).nnz == 0


def test_rejects_nonsymmetric_and_nonelliptic_samplers():
    grid = TorusGrid(8, 4)

    def nonsym(y1, y2, s):
        shape = np.broadcast_shapes(y1.shape, y2.shape, s.shape)
        one = np.ones(shape)
        return one, 0.3 * one, 0.1 * one, one  # a12 != a21

    with pytest.raises(nm.AssemblyError):
        nm.assemble_divergence_form(grid, nonsym)

    def indefinite(y1, y2, s):
        a = np.sin(2 * np.pi * y1) + 0.0 * y2 + 0.0 * s  # touches 0 and below
        return a, a, np.zeros_like(a)

    with pytest.raises(nm.AssemblyError):
        nm.assemble_divergence_form(grid, indefinite)


def test_operator_self_adjoint_on_random_fields():
    rng = np.random.default_rng(7)
    grid = TorusGrid(10, 4)
    A = make_field("rotated_frame", base=2.0, amplitude=0.8, other=1.5, angle=0.4)
    system = nm.assemble_divergence_form(grid, A, with_time=False)
    K = system.matrix
    for _ in range(5):
        u = rng.standard_normal(K.shape[0])
        v = rng.standard_normal(K.shape[0])
        lhs = np.dot(K @ u, v)
        rhs = np.dot(u, K @ v)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def _analytic_divergence(A_params, u, du1, du2, d11, d12, d22):
    """-div(A(y1) grad u) for the rotated_frame medium, closed form."""
    import math

    base, amp, other, angle = A_params
    c, sn = math.cos(angle), math.sin(angle)

    def parts(y1):
        a = base + amp * np.sin(2 * np.pi * y1)
        da = 2 * np.pi * amp * np.cos(2 * np.pi * y1)
        a11 = c * c * a + sn * sn * other
        a22 = sn * sn * a + c * c * other
        a12 = c * sn * (a - other)
        return a11, a22, a12, c * c * da, sn * sn * da, c * sn * da

    def rhs(y1, y2):
        a11, a22, a12, d_a11, d_a22, d_a12 = parts(y1)
        return -(
            d_a11 * du1(y1, y2)
            + a11 * d11(y1, y2)
            + d_a12 * du2(y1, y2)
            + 2 * a12 * d12(y1, y2)
            + a22 * d22(y1, y2)
        )

    return rhs


def test_second_order_consistency():
    params = (2.0, 0.8, 1.3, 0.6)
    A = make_field(
        "rotated_frame", base=params[0], amplitude=params[1],
        other=params[2], angle=params[3],
    )
    u_f = lambda y1, y2: np.sin(2 * np.pi * y1) * np.cos(4 * np.pi * y2)
    du1 = lambda y1, y2: 2 * np.pi * np.cos(2 * np.pi * y1) * np.cos(4 * np.pi * y2)
    du2 = lambda y1, y2: -4 * np.pi * np.sin(2 * np.pi * y1) * np.sin(4 * np.pi * y2)
    d11 = lambda y1, y2: -(2 * np.pi) ** 2 * u_f(y1, y2)
    d22 = lambda y1, y2: -(4 * np.pi) ** 2 * u_f(y1, y2)
    d12 = lambda y1, y2: -8 * np.pi**2 * np.cos(2 * np.pi * y1) * np.sin(4 * np.pi * y2)
    exact = _analytic_divergence(params, u_f, du1, du2, d11, d12, d22)

    errs, hs = [], []
    for n in (16, 32, 64):
        grid = TorusGrid(n, 4)
        y1, y2, _ = grid.node_coords()
        Y1, Y2 = y1[:, None], y2[None, :]
        u = np.repeat(u_f(Y1, Y2)[:, :, None], grid.n_time, axis=2)
        coeffs = nm.sample_staggered(grid, A, diagonal=False)
        lhs = nm.apply_divergence_form(u, coeffs)[:, :, 0]
        err = np.sqrt(np.mean((lhs - exact(Y1, Y2)) ** 2))
        errs.append(err)
        hs.append(grid.h)
    rate = np.log(errs[0] / errs[-1]) / np.log(hs[0] / hs[-1])
    assert rate >= 1.9


def test_solve_identity():
    rng = np.random.default_rng(3)
    b = rng.standard_normal(50)
    system = nm.SparseSystem(
        matrix=sp.identity(50, format="csr"), rhs=b, shape3=(50, 1, 1),
        symmetric=True,
    )
    x = nm.solve_sparse(system, tol=1e-12)
    assert np.allclose(x, b, atol=1e-12)


def test_solve_periodic_laplacian_eigenfunction():
    # rhs cos(2π y1) -> solution cos(2π y1) / λ_h with the stencil's own
    # analytic eigenvalue λ_h = (2 - 2 cos(2π h)) / h²
    grid = TorusGrid(32, 4)
    system = nm.assemble_laplacian_d1(grid, zero_mean=True)
    y1 = grid.node_coords()[0]
    rhs = np.broadcast_to(
        np.cos(2 * np.pi * y1)[:, None, None], grid.shape
    ).ravel()
    system.rhs = rhs.copy()
    x = nm.solve_sparse(system, tol=1e-12)
    lam_h = (2.0 - 2.0 * np.cos(2.0 * np.pi * grid.h)) / grid.h**2
    expected = rhs / lam_h
    assert np.max(np.abs(x - expected)) <= 1e-10


def test_solve_inconsistent_singular_system_fails():
    grid = TorusGrid(8, 4)
    system = nm.assemble_laplacian_d1(grid, zero_mean=True)
    system.rhs = np.ones(grid.n_nodes)  # constant rhs: not in the range
    with pytest.raises(nm.SolverError):
        nm.solve_sparse(system, tol=1e-10)


def test_solver_determinism():
    grid = TorusGrid(16, 8)
    A = make_field("laminate", axis=1, base=2.0, amplitude=1.0)
    system = nm.assemble_divergence_form(grid, A, zero_mean=True)
    y1 = grid.node_coords()[0]
    rhs = np.broadcast_to(
        np.sin(2 * np.pi * y1)[:, None, None], grid.shape
    ).ravel()
    rhs = rhs - rhs.mean()
    system.rhs = rhs
    x1 = nm.solve_sparse(system, tol=1e-11)
    x2 = nm.solve_sparse(system, tol=1e-11)
    assert np.array_equal(x1, x2)


def _unit_box_field(n=64, n_steps=16, values_fn=None):
    grid = BoxTimeGrid(half_width=0.5, n_cells=n, final_time=1.0,
                       n_steps=n_steps)
    x = grid.space_coords()
    t = grid.times()
    vals = values_fn(t[:, None, None], x[None, :, None], x[None, None, :])
    vals = np.broadcast_to(vals, (n_steps + 1, n + 1, n + 1)).copy()
    return SpaceTimeField(grid=grid, values=vals)


def test_space_time_norm_constant():
    u = _unit_box_field(values_fn=lambda t, x1, x2: np.ones_like(x1 + x2 + t))
    assert abs(nm.space_time_norm(u, 2.0) - 1.0) <= 1e-13
    assert abs(nm.space_time_norm(u, 7.0) - 1.0) <= 1e-13


def test_space_time_norm_linear_exact_integral():
    # u = x1 on the unit box, p = 2: exact integral gives 1/sqrt(3)
    u = _unit_box_field(
        n=128, values_fn=lambda t, x1, x2: (x1 + 0.5) + 0.0 * (x2 + t)
    )
    val = nm.space_time_norm(u, 2.0)
    assert abs(val - 1.0 / np.sqrt(3.0)) <= 5e-5


def test_space_time_norm_homogeneity_p4():
    c = 2.7
    u = _unit_box_field(values_fn=lambda t, x1, x2: c * np.ones_like(x1 + x2 + t))
    vol = 1.0  # unit box, T = 1
    assert abs(nm.space_time_norm(u, 4.0) - c * vol ** 0.25) <= 1e-12
    with pytest.raises(ValueError):
        nm.space_time_norm(u, 0.5)


def test_box_step_direct_matches_cg():
    grid = BoxTimeGrid(half_width=1.0, n_cells=32, final_time=0.5, n_steps=16)
    A = make_field("laminate", axis=1, base=2.0, amplitude=1.0, velocity=1.0)
    rng = np.random.default_rng(11)
    u_prev = np.zeros((grid.n_nodes, grid.n_nodes))
    u_prev[1:-1, 1:-1] = rng.standard_normal((grid.n_nodes - 2,) * 2)
    rhs = np.zeros_like(u_prev)
    rhs[1:-1, 1:-1] = rng.standard_normal((grid.n_nodes - 2,) * 2)

    direct = nm.BoxStepSolver(grid, A, eps=0.25, tol=1e-12)
    assert direct.direct

    class NoFlags:
        def __call__(self, y1, y2, s):
            return A(y1, y2, s)

    iterative = nm.BoxStepSolver(grid, NoFlags(), eps=0.25, tol=1e-12)
    assert not iterative.direct

    t = grid.tau
    xd = direct.step(u_prev, rhs, t)
    xi = iterative.step(u_prev, rhs, t)
    assert np.max(np.abs(xd - xi)) <= 1e-9
    # boundary ring stays exactly zero
    assert np.max(np.abs(xd[0])) == 0.0 and np.max(np.abs(xd[:, -1])) == 0.0
