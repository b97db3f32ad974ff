"""Stability-constrained chance-constrained dispatch for droop-controlled microgrids."""

from ._core import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
