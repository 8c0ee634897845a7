"""Physics-based shape-from-template reconstruction of cloth from monocular video."""
from . import _jax  # noqa: F401  (enables float64 before any array is created)

__version__ = "0.1.0"
