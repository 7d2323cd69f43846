"""Selects the kernel backend at import time.

The compiled Cython extension is preferred; the pure-numpy fallback is used
when the extension is missing or ``PVLU_PURE_PY=1`` is set.  Both backends
are bitwise-identical (see ``_kernels_py``), so the choice only affects
speed.  ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import _kernels_py

_compiled = None
if os.environ.get("PVLU_PURE_PY", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels_c as _compiled
    except ImportError:
        _compiled = None

kernels = _compiled if _compiled is not None else _kernels_py
BACKEND = "compiled" if _compiled is not None else "numpy"


def get_kernels(name=None):
    """Return a kernel module by name ("compiled"/"numpy"), or the active one."""
    if name is None:
        return kernels
    if name == "numpy":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernel extension is not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
