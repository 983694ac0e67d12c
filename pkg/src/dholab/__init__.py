"""Dual-head knowledge distillation laboratory.

Single-head (SHO) and dual-head (DHO) distillation of a small numpy student
under few-shot semi-supervision, gradient-conflict measurement, dual-head
interpolation inference, and numerical checks of the supporting theory.
"""

__version__ = "0.1.0"
