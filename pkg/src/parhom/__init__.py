"""parhom: quantitative homogenization toolkit for parabolic equations with a
planar interface between two space-time-periodic media."""

__version__ = "0.1.0"
