"""Kernel backend selection.

The compiled extension is used when it imports; ``DEPTEX_PURE_PYTHON=1`` forces
the numpy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("DEPTEX_PURE_PYTHON", "") not in ("", "0"):
    kernels = _kernels_py
else:
    try:
        from . import _kernels as kernels
    except ImportError:
        kernels = _kernels_py

BACKEND = kernels.NAME


def compiled():
    """Return the compiled kernel module, or None when it was not built."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
