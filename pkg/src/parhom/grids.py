"""Uniform grids on the space-time torus, the truncated cylinder, and the box.

All solvers in this package work in d = 2 space dimensions plus one periodic
time axis.  Array layout conventions used throughout:

* torus fields:    shape (n_space, n_space, n_time), axes (y1, y2, s),
                   node coordinates y = i*h, s = k*tau, periodic wrap.
* cylinder fields: shape (n_axial, n_space, n_time), axes (y1, y2, s),
                   y1 = -R + i*h including both Dirichlet ends.
* box fields:      spatial slices of shape (n_nodes, n_nodes), axes (x1, x2),
                   x = -L + i*h including the Dirichlet boundary ring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPACE_DIM = 2


class GridError(ValueError):
    """Raised when grid parameters violate an invariant."""


def _check_count(n: int, name: str) -> None:
    if n < 4 or n % 2 != 0:
        raise GridError(f"{name} must be an even integer >= 4, got {n}")


@dataclass(frozen=True)
class TorusGrid:
    """Unit space-time torus with n_space nodes per space axis, n_time in time."""

    n_space: int
    n_time: int

    def __post_init__(self):
        _check_count(self.n_space, "n_space")
        _check_count(self.n_time, "n_time")

    @property
    def h(self) -> float:
        return 1.0 / self.n_space

    @property
    def tau(self) -> float:
        return 1.0 / self.n_time

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_space, self.n_space, self.n_time)

    @property
    def n_nodes(self) -> int:
        return self.n_space * self.n_space * self.n_time

    def node_coords(self):
        """Node coordinate 1-D arrays (y1, y2, s)."""
        y = np.arange(self.n_space) * self.h
        s = np.arange(self.n_time) * self.tau
        return y, y.copy(), s

    def cell_volume(self) -> float:
        return self.h * self.h * self.tau


@dataclass(frozen=True)
class CylinderGrid:
    """Truncated cylinder (-R, R) x T^(d-1) x T with axial spacing = transverse spacing.

    The axial axis carries 2*R*n_space + 1 nodes so that y1 = -R, 0, R all sit
    exactly on nodes; the two end layers hold Dirichlet data.
    """

    half_length: float
    n_space: int
    n_time: int

    def __post_init__(self):
        _check_count(self.n_space, "n_space")
        _check_count(self.n_time, "n_time")
        if self.half_length <= 1.0:
            raise GridError(f"half_length must exceed 1, got {self.half_length}")
        r_cells = self.half_length * self.n_space
        if abs(r_cells - round(r_cells)) > 1e-12:
            raise GridError(
                "half_length must be an integer multiple of the transverse "
                f"spacing 1/{self.n_space}, got {self.half_length}"
            )

    @property
    def h(self) -> float:
        return 1.0 / self.n_space

    @property
    def tau(self) -> float:
        return 1.0 / self.n_time

    @property
    def n_axial(self) -> int:
        return 2 * int(round(self.half_length * self.n_space)) + 1

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_axial, self.n_space, self.n_time)

    @property
    def n_nodes(self) -> int:
        return self.n_axial * self.n_space * self.n_time

    def axial_coords(self) -> np.ndarray:
        return -self.half_length + np.arange(self.n_axial) * self.h

    def node_coords(self):
        y2 = np.arange(self.n_space) * self.h
        s = np.arange(self.n_time) * self.tau
        return self.axial_coords(), y2, s

    def interface_index(self) -> int:
        """Axial index of the y1 = 0 node."""
        return int(round(self.half_length * self.n_space))

    def axial_index(self, y1: float) -> int:
        idx = (y1 + self.half_length) * self.n_space
        j = int(round(idx))
        if abs(idx - j) > 1e-9 or not 0 <= j < self.n_axial:
            raise GridError(f"y1={y1} is not a grid node of {self}")
        return j

    def cell_volume(self) -> float:
        return self.h * self.h * self.tau


@dataclass(frozen=True)
class BoxTimeGrid:
    """Box (-L, L)^d x (0, T): n_cells per space axis, n_steps backward-Euler steps.

    n_cells even keeps the interface plane {x1 = 0} on grid nodes.  The
    implicit marching scheme has no CFL restriction; n_steps >= 16 is still
    required so the time quadrature is meaningful.
    """

    half_width: float
    n_cells: int
    final_time: float
    n_steps: int

    def __post_init__(self):
        _check_count(self.n_cells, "n_cells")
        if self.half_width <= 0:
            raise GridError("half_width must be positive")
        if self.final_time <= 0:
            raise GridError("final_time must be positive")
        if self.n_steps < 16:
            raise GridError(
                f"n_steps must be >= 16 (step <= T/16), got {self.n_steps}"
            )

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.n_cells

    @property
    def tau(self) -> float:
        return self.final_time / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @property
    def space_shape(self) -> tuple[int, int]:
        return (self.n_nodes, self.n_nodes)

    def space_coords(self) -> np.ndarray:
        return -self.half_width + np.arange(self.n_nodes) * self.h

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.tau

    def interface_index(self) -> int:
        return self.n_cells // 2
