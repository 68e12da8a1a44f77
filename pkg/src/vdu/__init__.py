"""Instruction-driven visual document understanding pipeline at desk scale."""

__version__ = "0.1.0"
