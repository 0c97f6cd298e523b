"""Kernel backend selection.

The compiled module is used when it imports; set ``NPD_PURE_PYTHON=1`` to
force the numpy fallback.
"""

import os

from . import _kernels_py

if os.environ.get("NPD_PURE_PYTHON") == "1":
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

active = _compiled if _compiled is not None else _kernels_py
BACKEND = active.BACKEND


def backends():
    """All importable backends, compiled first."""
    return [m for m in (_compiled, _kernels_py) if m is not None]
