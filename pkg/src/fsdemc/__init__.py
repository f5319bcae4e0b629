"""Simulation and verification toolkit for path-dependent SDEs with Girsanov reweighting."""

__version__ = "0.1.0"
