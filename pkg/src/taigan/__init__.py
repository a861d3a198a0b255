"""Temporally and anatomically informed GAN frame conversion for dynamic cardiac PET,
with a digital phantom, B-spline registration and 1-tissue kinetic quantification."""

__version__ = "0.1.0"
