"""Inner kernels, compiled when available.

The Cython module is used when it imports; otherwise, or when the
environment variable ``SPARCC_PURE_PYTHON`` is set to a non-empty value
other than ``0``, the numpy implementations are used. ``BACKEND`` names
the active choice.
"""

import os

from . import _pykernels

_force_python = os.environ.get("SPARCC_PURE_PYTHON", "") not in ("", "0")

if _force_python:
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

assemble_fredholm = _impl.assemble_fredholm
tail_weights = _impl.tail_weights

__all__ = ["BACKEND", "assemble_fredholm", "tail_weights"]
