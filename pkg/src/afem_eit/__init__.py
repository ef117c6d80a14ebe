"""Adaptive finite elements for electrical impedance tomography (complete electrode model)."""

__version__ = "0.1.0"
