"""Masked video distillation at desk scale: teachers, co-teaching students, analysis."""

__all__ = ["__version__"]

__version__ = "0.1.0"
