"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``CCSCOPF_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

if os.environ.get("CCSCOPF_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"

power_injections = _impl.power_injections
injection_jacobian = _impl.injection_jacobian
lyapunov_schur = _impl.lyapunov_schur


def compiled_module():
    """The compiled module, or None when it is not built."""
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return None
    return _kernels


__all__ = ["BACKEND", "power_injections", "injection_jacobian", "lyapunov_schur", "compiled_module"]
