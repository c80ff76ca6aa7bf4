"""Tape autodiff, the convolutional vector field, Adam, and checkpoints."""
from .adam import AdamState, adam_step
from .network import Architecture, build, init_params, net_forward
from .tape import Tape, Var, backward, grad_check

__all__ = [
    "AdamState", "adam_step", "Architecture", "build", "init_params", "net_forward",
    "Tape", "Var", "backward", "grad_check",
]
