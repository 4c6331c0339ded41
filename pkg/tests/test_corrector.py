"""Tests for cutoffs, the interface source, and the cylinder corrector."""

import numpy as np
import pytest

from parhom import cell, corrector, dual
from parhom.coefficients import TwoSidedField, make_field
from parhom.grids import CylinderGrid, TorusGrid
from parhom.interface import build_profile

from conftest import CYL, TORUS


def test_cutoff_support_constraints():
    c = corrector.make_cutoffs()
    assert c.plus(1.5) == 1.0
    assert c.plus(-0.5) == 0.0
    assert c.minus(-1.5) == 1.0
    assert c.minus(0.5) == 0.0
    y = np.linspace(-2, 2, 401)
    assert np.all((c.plus(y) >= 0) & (c.plus(y) <= 1))
    # mirror symmetry psi_plus(y) = psi_minus(-y)
    assert np.allclose(c.plus(y), c.minus(-y))
    # derivative support: psi_plus' vanishes outside (0, 1)
    outside = (y <= 0) | (y >= 1)
    assert np.all(c.plus_d1(y)[outside] == 0.0)
    assert np.all(c.plus_d2(y)[outside] == 0.0)


def test_cutoff_c2_smoothness():
    c = corrector.make_cutoffs()
    y = np.linspace(-0.5, 1.5, 2001)
    h = y[1] - y[0]
    d1 = np.gradient(c.plus(y), h)
    d2 = np.gradient(c.plus_d1(y), h)
    assert np.max(np.abs(d1 - c.plus_d1(y))) <= 5e-3
    # psi is C^2 but not C^3: the corners commit O(h)|psi'''| differencing error
    assert np.max(np.abs(d2 - c.plus_d2(y))) <= 5e-2
    # continuity of psi'' at the corners (the C^2 requirement itself)
    for corner in (0.0, 1.0):
        left = c.plus_d2(corner - 1e-9)
        right = c.plus_d2(corner + 1e-9)
        assert abs(left - right) <= 1e-6


@pytest.fixture(scope="module")
def constant_setup():
    A = make_field("constant", m11=1.5, m22=1.5)
    two = TwoSidedField(plus=A, minus=A)
    cells = cell.solve_cell_problems(A, TORUS, tol=1e-12)
    prof = build_profile(cells.tensor, cells.tensor)
    dl = dual.periodic_dual(A, cells, tol=1e-12)
    cut = corrector.make_cutoffs()
    return two, prof, cells, dl, cut


def test_constant_media_give_zero_source_and_corrector(constant_setup):
    two, prof, cells, dl, cut = constant_setup
    src = corrector.assemble_interface_source(
        two, prof, cells, cells, dl, dl, cut, CYL, 1
    )
    assert np.max(np.abs(src.flux_axis0)) == 0.0
    assert np.max(np.abs(src.flux_axis1)) == 0.0
    assert np.max(np.abs(src.rhs_exact)) <= 1e-14
    sol = corrector.solve_interface_corrector(src, two, prof, CYL, tol=1e-11)
    assert np.max(np.abs(sol.w.values)) <= 1e-12
    assert np.max(np.abs(sol.chi.values)) <= 1e-12


def test_source_requires_dual_correctors(media_pair, cells_pm, profile,
                                         cutoffs):
    with pytest.raises(corrector.CorrectorError):
        corrector.assemble_interface_source(
            media_pair, profile, cells_pm[0], cells_pm[1], None, None,
            cutoffs, CYL, 1,
        )


def test_source_supported_near_interface(media_pair, cells_pm, profile,
                                         duals_pm, cutoffs):
    for j in (1, 2):
        src = corrector.assemble_interface_source(
            media_pair, profile, cells_pm[0], cells_pm[1],
            duals_pm[0], duals_pm[1], cutoffs, CYL, j,
        )
        # the flux-form field is identically zero outside |y1| <= 1
        assert src.support_max_outside <= 1e-12
        # the exact discrete residual inherits only the torus solve residue
        assert src.residual_leak_outside <= 1e-9
        assert np.isfinite(src.norm_l2) and src.norm_l2 > 0


def test_corrector_recovery_residual(corrector_solutions):
    for j, sol in corrector_solutions.items():
        assert sol.residual <= 10 * sol.tol


def test_corrector_energy_bound(media_pair, corrector_solutions):
    # || grad w || <= C(kappa) || f_tilde ||, C from discrete ellipticity
    for sol in corrector_solutions.values():
        assert sol.energy_ratio <= 2.0 / media_pair.kappa
        assert np.isfinite(sol.time_energy_ratio)


def test_flux_constancy(media_pair, corrector_solutions):
    for sol in corrector_solutions.values():
        table = corrector.flux_constancy_check(sol, media_pair)
        # conserved flux killed by the boundary lift; constancy to solver tol
        assert table["max_abs"] <= 10 * sol.tol * max(sol.source.norm_l2, 1.0)
        assert table["max_spread"] <= 10 * sol.tol * max(sol.source.norm_l2, 1.0)


def test_same_media_matches_periodic_corrector(cutoffs):
    # A_plus = A_minus periodic: away from the interface window, grad chi_1
    # approaches the periodic corrector's gradient (torus solve as oracle)
    A = make_field("laminate", axis=1, base=2.0, amplitude=1.0)
    two = TwoSidedField(plus=A, minus=A)
    cells = cell.solve_cell_problems(A, TORUS, tol=1e-12)
    prof = build_profile(cells.tensor, cells.tensor)
    dl = dual.periodic_dual(A, cells, tol=1e-12)
    src = corrector.assemble_interface_source(
        two, prof, cells, cells, dl, dl, cut := corrector.make_cutoffs(),
        CYL, 1,
    )
    assert src.support_max_outside <= 1e-12
    sol = corrector.solve_interface_corrector(src, two, prof, CYL, tol=1e-11)
    chi_wrapped = corrector.wrap_to_cylinder(cells.chi[0].values, CYL)
    y1 = CYL.axial_coords()
    sel = np.abs(y1) >= 2.0
    d_chi = np.diff(sol.chi.values, axis=0) / CYL.h
    d_ref = np.diff(chi_wrapped, axis=0) / CYL.h
    sel_f = sel[:-1] & sel[1:]
    assert np.max(np.abs(d_chi[sel_f] - d_ref[sel_f])) <= 1e-3


def test_decay_report(media_pair, corrector_solutions):
    for sol in corrector_solutions.values():
        rep = corrector.fit_decay(sol)
        assert not rep.below_floor
        assert rep.lambda_plus is not None and rep.lambda_plus > 0
        assert rep.lambda_minus is not None and rep.lambda_minus > 0
        assert rep.r2_plus >= 0.9 and rep.r2_minus >= 0.9
        assert rep.monotone_plus and rep.monotone_minus


def test_truncation_stability(media_pair, cells_pm, profile, duals_pm,
                              cutoffs, corrector_solutions):
    # doubling the cylinder barely moves the interior gradient of chi
    big = CylinderGrid(half_length=8.0, n_space=16, n_time=8)
    src = corrector.assemble_interface_source(
        media_pair, profile, cells_pm[0], cells_pm[1],
        duals_pm[0], duals_pm[1], cutoffs, big, 1,
    )
    sol_big = corrector.solve_interface_corrector(
        src, media_pair, profile, big, tol=1e-11
    )
    small = corrector_solutions[1]
    y1s = CYL.axial_coords()
    y1b = big.axial_coords()
    sel_s = np.abs(y1s[:-1] + CYL.h / 2) <= 4.0
    sel_b = np.abs(y1b[:-1] + big.h / 2) <= 4.0
    gs = np.diff(small.chi.values, axis=0)[sel_s] / CYL.h
    gb = np.diff(sol_big.chi.values, axis=0)[sel_b] / big.h
    rel = np.max(np.abs(gs - gb)) / max(np.max(np.abs(gb)), 1e-30)
    rep = corrector.fit_decay(sol_big)
    lam = min(rep.lambda_plus, rep.lambda_minus)
    assert rel <= np.exp(-lam * (CYL.half_length - 2.0)) + 1e-9


def test_binary_dump_roundtrip(tmp_path, corrector_solutions):
    from parhom.fields import dump_cylinder_field, load_cylinder_field

    sol = corrector_solutions[1]
    path = tmp_path / "chi1.bin"
    dump_cylinder_field(sol.chi, path)
    back = load_cylinder_field(path)
    assert back.grid == sol.chi.grid
    assert np.array_equal(back.values, sol.chi.values)
