"""Conditional point-cloud diffusion with UDF self-conditioning, in numpy."""

__version__ = "0.1.0"
