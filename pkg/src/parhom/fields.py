"""Field containers tied to the three grid families."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grids import BoxTimeGrid, CylinderGrid, TorusGrid


@dataclass(frozen=True)
class TorusField:
    """Scalar nodal values on a TorusGrid; correctors carry zero mean."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} != grid shape {self.grid.shape}"
            )
        self.values.setflags(write=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True)
class CylinderField:
    """Scalar nodal values on a CylinderGrid; optional Dirichlet end layers."""

    grid: CylinderGrid
    values: np.ndarray
    dirichlet_ends: bool = True

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} != grid shape {self.grid.shape}"
            )
        self.values.setflags(write=False)

    def end_max(self) -> float:
        return float(
            max(np.max(np.abs(self.values[0])), np.max(np.abs(self.values[-1])))
        )


_DUMP_MAGIC = b"PHCF"


def dump_cylinder_field(field: CylinderField, path) -> None:
    """Flat binary dump: magic, dims, spacing header, axial-major float64 payload."""
    g = field.grid
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(
            struct.pack(
                "<iiidd", g.n_axial, g.n_space, g.n_time, g.half_length, g.h
            )
        )
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def load_cylinder_field(path) -> CylinderField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DUMP_MAGIC:
            raise ValueError(f"not a cylinder-field dump: bad magic {magic!r}")
        n_axial, n_space, n_time, half_length, h = struct.unpack(
            "<iiidd", fh.read(struct.calcsize("<iiidd"))
        )
        payload = np.frombuffer(fh.read(), dtype="<f8").reshape(
            n_axial, n_space, n_time
        )
    grid = CylinderGrid(half_length=half_length, n_space=n_space, n_time=n_time)
    return CylinderField(grid=grid, values=payload.copy())


@dataclass(frozen=True)
class SpaceTimeField:
    """u(x, t) on a box-time grid; values shape (n_steps+1, n_nodes, n_nodes).

    The role tag distinguishes the pipeline fields (u_eps, u0, w_eps, source,
    ...) and is immutable like the payload.
    """

    grid: BoxTimeGrid
    values: np.ndarray
    role: str = "field"

    def __post_init__(self):
        expected = (self.grid.n_steps + 1, self.grid.n_nodes, self.grid.n_nodes)
        if self.values.shape != expected:
            raise ValueError(
                f"values shape {self.values.shape} != expected {expected}"
            )
        self.values.setflags(write=False)

    def initial_slice_max(self) -> float:
        return float(np.max(np.abs(self.values[0])))
