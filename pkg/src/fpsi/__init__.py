"""Coupled Stokes / poroelastic plate / Biot solver on a layered periodic domain."""

__version__ = "0.1.0"
