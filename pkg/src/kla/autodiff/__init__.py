"""Reverse-mode differentiation, the toy model and its training loop."""

from .tape import Tape, TapeError, Var, finite_diff, grad

__all__ = ["Tape", "TapeError", "Var", "finite_diff", "grad"]
