"""Hot kernels with a numba backend and a pure-numpy fallback.

The backend is picked once at import from ``VLKIT_KERNELS`` (``numba`` or
``numpy``). Without the variable, numba is used when it imports cleanly.
Both backends expose the same functions; ``get_backend(name)`` returns a
specific one for parity tests and benchmarks.
"""

import importlib
import os

from . import _numpy

_NAMES = ("numba", "numpy")


def get_backend(name):
    if name not in _NAMES:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {_NAMES}")
    if name == "numpy":
        return _numpy
    return importlib.import_module(f"{__name__}._numba")


def _select():
    requested = os.environ.get("VLKIT_KERNELS", "").strip().lower()
    if requested:
        return get_backend(requested)
    try:
        return get_backend("numba")
    except ImportError:
        return _numpy


_backend = _select()
name = "numpy" if _backend is _numpy else "numba"

attention_forward = _backend.attention_forward
attention_backward = _backend.attention_backward
rope_rotate = _backend.rope_rotate
topk_indices = _backend.topk_indices
expert_counts = _backend.expert_counts
first_fit = _backend.first_fit
