"""Pulse reconstruction by reverse-time stochastic interpolants."""
from .errors import PulseFlowError

__version__ = "0.1.0"

__all__ = ["PulseFlowError", "__version__"]
