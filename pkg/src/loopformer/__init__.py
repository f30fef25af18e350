"""Desk-scale lab for depth-recurrent (looped) transformers."""

from loopformer.tensor import Tape, Tensor, no_grad, precision

__all__ = ["Tensor", "Tape", "no_grad", "precision"]
__version__ = "0.1.0"
