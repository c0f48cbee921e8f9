"""Fluctuation-theorem laboratory for measurement-and-feedback protocols on small open quantum systems."""
from .config import ConfigError, load_protocol
from .protocol import Protocol, reverse_protocol
from .qdyn import DensityMatrix, JumpChannel, KrausSet

__all__ = ["ConfigError", "DensityMatrix", "JumpChannel", "KrausSet", "Protocol", "load_protocol", "reverse_protocol"]
__version__ = "0.1.0"
