"""Seismic velocity inversion workbench: finite-difference modelling,
adjoint-state inversion and an adversarial encoder-decoder."""

__version__ = "0.1.0"
