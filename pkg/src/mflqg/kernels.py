"""Kernel selection: the compiled extension when importable, numpy otherwise.

Set MFLQG_PURE_PYTHON=1 to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
euler_population = _kernels_py.euler_population

if os.environ.get("MFLQG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        euler_population = _compiled.euler_population
        BACKEND = "cython"
