"""Shared pipeline fixtures: one contrasting media pair solved at desk scale."""

import numpy as np
import pytest

from parhom import cell, corrector, dual
from parhom.coefficients import TwoSidedField, make_field
from parhom.grids import CylinderGrid, TorusGrid
from parhom.interface import build_profile

TORUS = TorusGrid(16, 8)
CYL = CylinderGrid(half_length=6.0, n_space=16, n_time=8)


@pytest.fixture(scope="session")
def media_pair():
    plus = make_field("laminate", axis=2, base=2.0, amplitude=1.0)
    minus = make_field("laminate", axis=1, base=2.0, amplitude=1.0)
    return TwoSidedField(plus=plus, minus=minus)


@pytest.fixture(scope="session")
def cells_pm(media_pair):
    return (
        cell.solve_cell_problems(media_pair.plus, TORUS, tol=1e-12),
        cell.solve_cell_problems(media_pair.minus, TORUS, tol=1e-12),
    )


@pytest.fixture(scope="session")
def profile(cells_pm):
    return build_profile(cells_pm[0].tensor, cells_pm[1].tensor)


@pytest.fixture(scope="session")
def duals_pm(media_pair, cells_pm):
    return (
        dual.periodic_dual(media_pair.plus, cells_pm[0], tol=1e-12),
        dual.periodic_dual(media_pair.minus, cells_pm[1], tol=1e-12),
    )


@pytest.fixture(scope="session")
def cutoffs():
    return corrector.make_cutoffs()


@pytest.fixture(scope="session")
def corrector_solutions(media_pair, cells_pm, profile, duals_pm, cutoffs):
    out = {}
    for j in (1, 2):
        src = corrector.assemble_interface_source(
            media_pair, profile, cells_pm[0], cells_pm[1],
            duals_pm[0], duals_pm[1], cutoffs, CYL, j,
        )
        out[j] = corrector.solve_interface_corrector(
            src, media_pair, profile, CYL, tol=1e-11
        )
    return out


@pytest.fixture(scope="session")
def interface_duals(media_pair, profile, corrector_solutions, cells_pm,
                    duals_pm, cutoffs):
    return dual.interface_dual(
        media_pair, profile, corrector_solutions, cells_pm[0], cells_pm[1],
        duals_pm[0], duals_pm[1], cutoffs, CYL, tol=1e-11,
    )
