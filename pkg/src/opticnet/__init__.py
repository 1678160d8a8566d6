"""Optic-Net: a numpy deep-learning engine for the Optic-Net CNN family."""

from opticnet.tensor import Tensor, Variable, Tape, backward, zero_grad, no_grad
from opticnet.model import ModelConfig, OpticNet, assemble_model

__all__ = ["Tensor", "Variable", "Tape", "backward", "zero_grad", "no_grad",
           "ModelConfig", "OpticNet", "assemble_model"]
__version__ = "0.1.0"
