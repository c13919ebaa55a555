"""Numerical verification toolkit for blow-up profiles of ``u_t = Laplacian u + |u|^(p-1) u``."""

from .grid import Field, GridSpec
from .model import Params

__all__ = ["Field", "GridSpec", "Params"]
__version__ = "0.1.0"
