"""Catalog of space-time-periodic coefficient fields.

Every medium is a closed-form sampler registered by name, so experiment
configs stay reproducible without parsing code.  Samplers return the three
independent entries (a11, a22, a12) of a symmetric 2x2 matrix, broadcast over
point arrays (y1, y2, s), 1-periodic in all arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grids import TorusGrid


class CoefficientError(ValueError):
    """Raised for non-elliptic, non-symmetric, or malformed coefficient specs."""


Sampler = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]


@dataclass(frozen=True)
class PeriodicCoefficientField:
    """A symmetric elliptic matrix field A(y, s), 1-periodic in (y1, y2, s).

    kappa is the declared two-sided ellipticity constant (kappa <= eig(A) <=
    1/kappa at every sample); time_lipschitz bounds |A(y,t) - A(y,s)| / |t-s|.
    x1_structured marks media whose spatial variation is along y1 only, which
    unlocks the direct transverse-diagonalized box solver; diagonal marks
    a12 == 0.
    """

    name: str
    params: dict
    sampler: Sampler
    kappa: float
    time_lipschitz: float
    time_dependent: bool
    x1_structured: bool
    diagonal: bool

    def __call__(self, y1, y2, s):
        a11, a22, a12 = self.sampler(np.asarray(y1), np.asarray(y2), np.asarray(s))
        return a11, a22, a12

    def sample_on(self, grid: TorusGrid):
        """Node samples of (a11, a22, a12) on a torus grid."""
        y1, y2, s = grid.node_coords()
        return self(y1[:, None, None], y2[None, :, None], s[None, None, :])

    def validate_on(self, grid: TorusGrid) -> None:
        """Check ellipticity against the declared kappa on grid samples."""
        a11, a22, a12 = [np.broadcast_to(a, grid.shape) for a in self.sample_on(grid)]
        lo, hi = _eig_range(a11, a22, a12)
        slack = 1e-12
        if lo < self.kappa - slack or hi > 1.0 / self.kappa + slack:
            raise CoefficientError(
                f"field {self.name!r}: sampled spectrum [{lo:.6g}, {hi:.6g}] "
                f"violates declared kappa={self.kappa:.6g}"
            )


def _eig_range(a11, a22, a12):
    mid = 0.5 * (a11 + a22)
    rad = np.sqrt(0.25 * (a11 - a22) ** 2 + np.asarray(a12) ** 2)
    return float(np.min(mid - rad)), float(np.max(mid + rad))


def _kappa_from_range(lo: float, hi: float) -> float:
    if lo <= 0:
        raise CoefficientError(f"field is not elliptic: min eigenvalue {lo:.6g}")
    return min(lo, 1.0 / hi)


def _axis_coord(axis: int, y1, y2):
    if axis == 1:
        return y1
    if axis == 2:
        return y2
    raise CoefficientError(f"axis must be 1 or 2, got {axis}")


def make_field(kind: str, **params) -> PeriodicCoefficientField:
    """Instantiate a catalog entry by name.

    Kinds
    -----
    constant:       m11, m22, m12 — constant symmetric matrix.
    laminate:       base + amplitude*sin(2*pi*(coord - velocity*s) + phase)
                    times the identity; coord selected by axis (1 or 2).
    laminate_diag:  diag(base + amplitude*sin(2*pi*coord + phase), other).
    trig2d:         base + amplitude*sin(2*pi*y1)*sin(2*pi*y2), isotropic
                    (smoothed checkerboard).
    separable:      trig2d profile modulated by (1 + modulation*sin(2*pi*s)).
    rotated_frame:  R(angle)^T diag(base + amplitude*sin(2*pi*y1), other)
                    R(angle) — full symmetric tensor varying along y1.
    """
    if kind == "constant":
        m11 = float(params.get("m11", 1.0))
        m22 = float(params.get("m22", 1.0))
        m12 = float(params.get("m12", 0.0))
        lo, hi = _eig_range(np.array(m11), np.array(m22), np.array(m12))

        def sampler(y1, y2, s, m11=m11, m22=m22, m12=m12):
            shape = np.broadcast_shapes(y1.shape, y2.shape, s.shape)
            return (
                np.full(shape, m11),
                np.full(shape, m22),
                np.full(shape, m12),
            )

        return PeriodicCoefficientField(
            name=kind,
            params={"m11": m11, "m22": m22, "m12": m12},
            sampler=sampler,
            kappa=_kappa_from_range(lo, hi),
            time_lipschitz=0.0,
            time_dependent=False,
            x1_structured=True,
            diagonal=(m12 == 0.0),
        )

    if kind == "laminate":
        axis = int(params.get("axis", 1))
        base = float(params.get("base", 2.0))
        amp = float(params.get("amplitude", 1.0))
        phase = float(params.get("phase", 0.0))
        vel = float(params.get("velocity", 0.0))
        lo, hi = base - abs(amp), base + abs(amp)

        def sampler(y1, y2, s, axis=axis, base=base, amp=amp, phase=phase, vel=vel):
            c = _axis_coord(axis, y1, y2)
            a = base + amp * np.sin(2.0 * np.pi * (c - vel * s) + phase)
            a = np.broadcast_to(a, np.broadcast_shapes(y1.shape, y2.shape, s.shape))
            return a, a, np.zeros_like(a)

        return PeriodicCoefficientField(
            name=kind,
            params={"axis": axis, "base": base, "amplitude": amp,
                    "phase": phase, "velocity": vel},
            sampler=sampler,
            kappa=_kappa_from_range(lo, hi),
            time_lipschitz=2.0 * np.pi * abs(amp * vel),
            time_dependent=(vel != 0.0 and amp != 0.0),
            x1_structured=(axis == 1),
            diagonal=True,
        )

    if kind == "laminate_diag":
        axis = int(params.get("axis", 1))
        base = float(params.get("base", 2.0))
        amp = float(params.get("amplitude", 1.0))
        phase = float(params.get("phase", 0.0))
        other = float(params.get("other", 1.0))
        lo = min(base - abs(amp), other)
        hi = max(base + abs(amp), other)

        def sampler(y1, y2, s, axis=axis, base=base, amp=amp, phase=phase,
                    other=other):
            c = _axis_coord(axis, y1, y2)
            a = base + amp * np.sin(2.0 * np.pi * c + phase)
            shape = np.broadcast_shapes(y1.shape, y2.shape, s.shape)
            a = np.broadcast_to(a, shape)
            first = a if axis == 1 else np.full(shape, other)
            second = np.full(shape, other) if axis == 1 else a
            return first, second, np.zeros(shape)

        return PeriodicCoefficientField(
            name=kind,
            params={"axis": axis, "base": base, "amplitude": amp,
                    "phase": phase, "other": other},
            sampler=sampler,
            kappa=_kappa_from_range(lo, hi),
            time_lipschitz=0.0,
            time_dependent=False,
            x1_structured=(axis == 1),
            diagonal=True,
        )

    if kind == "trig2d":
        base = float(params.get("base", 2.0))
        amp = float(params.get("amplitude", 1.0))
        lo, hi = base - abs(amp), base + abs(amp)

        def sampler(y1, y2, s, base=base, amp=amp):
            a = base + amp * np.sin(2.0 * np.pi * y1) * np.sin(2.0 * np.pi * y2)
            a = np.broadcast_to(a, np.broadcast_shapes(y1.shape, y2.shape, s.shape))
            return a, a, np.zeros_like(a)

        return PeriodicCoefficientField(
            name=kind,
            params={"base": base, "amplitude": amp},
            sampler=sampler,
            kappa=_kappa_from_range(lo, hi),
            time_lipschitz=0.0,
            time_dependent=False,
            x1_structured=False,
            diagonal=True,
        )

    if kind == "separable":
        base = float(params.get("base", 2.0))
        amp = float(params.get("amplitude", 1.0))
        mod = float(params.get("modulation", 0.5))
        if not 0.0 <= mod < 1.0:
            raise CoefficientError("separable modulation must lie in [0, 1)")
        lo = (base - abs(amp)) * (1.0 - mod)
        hi = (base + abs(amp)) * (1.0 + mod)

        def sampler(y1, y2, s, base=base, amp=amp, mod=mod):
            a0 = base + amp * np.sin(2.0 * np.pi * y1) * np.sin(2.0 * np.pi * y2)
            m = 1.0 + mod * np.sin(2.0 * np.pi * s)
            a = a0 * m
            a = np.broadcast_to(a, np.broadcast_shapes(y1.shape, y2.shape, s.shape))
            return a, a, np.zeros_like(a)

        return PeriodicCoefficientField(
            name=kind,
            params={"base": base, "amplitude": amp, "modulation": mod},
            sampler=sampler,
            kappa=_kappa_from_range(lo, hi),
            time_lipschitz=2.0 * np.pi * mod * (base + abs(amp)),
            time_dependent=(mod != 0.0),
            x1_structured=False,
            diagonal=True,
        )

    if kind == "rotated_frame":
        base = float(params.get("base", 2.0))
        amp = float(params.get("amplitude", 1.0))
        other = float(params.get("other", 1.0))
        angle = float(params.get("angle", 0.3))
        lo = min(base - abs(amp), other)
        hi = max(base + abs(amp), other)
        c, sn = math.cos(angle), math.sin(angle)

        def sampler(y1, y2, s, base=base, amp=amp, other=other, c=c, sn=sn):
            a = base + amp * np.sin(2.0 * np.pi * y1)
            shape = np.broadcast_shapes(y1.shape, y2.shape, s.shape)
            a = np.broadcast_to(a, shape)
            b = np.full(shape, other)
            # R^T diag(a, b) R with R the rotation by `angle`
            a11 = c * c * a + sn * sn * b
            a22 = sn * sn * a + c * c * b
            a12 = c * sn * (a - b)
            return a11, a22, a12

        return PeriodicCoefficientField(
            name=kind,
            params={"base": base, "amplitude": amp, "other": other,
                    "angle": angle},
            sampler=sampler,
            kappa=_kappa_from_range(lo, hi),
            time_lipschitz=0.0,
            time_dependent=False,
            x1_structured=True,
            diagonal=False,
        )

    raise CoefficientError(f"unknown coefficient kind {kind!r}")


@dataclass(frozen=True)
class TwoSidedField:
    """A(y, s) = A_plus for y1 > 0, A_minus for y1 < 0 (minus at y1 = 0).

    Follows the sampler protocol, so the same assembly, marching, and
    stencil-application machinery runs on interface problems unchanged.
    """

    plus: PeriodicCoefficientField
    minus: PeriodicCoefficientField

    @property
    def diagonal(self) -> bool:
        return self.plus.diagonal and self.minus.diagonal

    @property
    def x1_structured(self) -> bool:
        return self.plus.x1_structured and self.minus.x1_structured

    @property
    def time_dependent(self) -> bool:
        return self.plus.time_dependent or self.minus.time_dependent

    @property
    def kappa(self) -> float:
        return min(self.plus.kappa, self.minus.kappa)

    @property
    def time_lipschitz(self) -> float:
        return max(self.plus.time_lipschitz, self.minus.time_lipschitz)

    def __call__(self, y1, y2, s):
        y1 = np.asarray(y1)
        ap = self.plus(y1, y2, s)
        am = self.minus(y1, y2, s)
        plus = y1 > 0
        shape = np.broadcast_shapes(plus.shape, ap[0].shape)
        plus = np.broadcast_to(plus, shape)
        return tuple(np.where(plus, p, m) for p, m in zip(ap, am))


def random_field(rng: np.random.Generator) -> PeriodicCoefficientField:
    """Draw a random elliptic catalog instance (for property tests)."""
    kind = rng.choice(
        ["constant", "laminate", "laminate_diag", "trig2d", "separable",
         "rotated_frame"]
    )
    if kind == "constant":
        m11 = rng.uniform(0.5, 3.0)
        m22 = rng.uniform(0.5, 3.0)
        m12 = rng.uniform(-0.8, 0.8) * math.sqrt(m11 * m22)
        return make_field(kind, m11=m11, m22=m22, m12=m12)
    if kind == "laminate":
        base = rng.uniform(1.5, 3.0)
        return make_field(
            kind,
            axis=int(rng.choice([1, 2])),
            base=base,
            amplitude=rng.uniform(0.2, base - 0.5),
            phase=rng.uniform(0.0, 2.0 * np.pi),
            velocity=float(rng.choice([0.0, 1.0])),
        )
    if kind == "laminate_diag":
        base = rng.uniform(1.5, 3.0)
        return make_field(
            kind,
            axis=int(rng.choice([1, 2])),
            base=base,
            amplitude=rng.uniform(0.2, base - 0.5),
            phase=rng.uniform(0.0, 2.0 * np.pi),
            other=rng.uniform(0.5, 3.0),
        )
    if kind == "trig2d":
        base = rng.uniform(1.5, 3.0)
        return make_field(kind, base=base, amplitude=rng.uniform(0.2, base - 0.5))
    if kind == "separable":
        base = rng.uniform(1.5, 3.0)
        return make_field(
            kind,
            base=base,
            amplitude=rng.uniform(0.2, base - 0.5),
            modulation=rng.uniform(0.1, 0.6),
        )
    base = rng.uniform(1.5, 3.0)
    return make_field(
        "rotated_frame",
        base=base,
        amplitude=rng.uniform(0.2, base - 0.5),
        other=rng.uniform(0.5, 3.0),
        angle=rng.uniform(0.1, 1.4),
    )
