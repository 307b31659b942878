"""Kernel backend selection.

The compiled extension is used when it is built; otherwise the numpy
fallback takes over. Set MOELAB_PURE_PYTHON=1 to force the fallback.
Both backends are bit-identical, so the choice only affects speed.
"""

import os


def load_backend(name):
    """Return the kernel module for an explicit backend name."""
    if name == "python":
        from . import _kernels_py
        return _kernels_py
    if name == "compiled":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}, expected 'compiled' or 'python'")


if os.environ.get("MOELAB_PURE_PYTHON"):
    kernels = load_backend("python")
    BACKEND = "python"
else:
    try:
        kernels = load_backend("compiled")
        BACKEND = "compiled"
    except ImportError:
        kernels = load_backend("python")
        BACKEND = "python"
