"""Hot kernels with a compiled backend and a pure-numpy fallback.

The compiled extension is used when it imports; set ``BISEQ_PURE_PYTHON=1``
to force the fallback.
"""
import importlib
import os

from . import _pykernels

_NAMES = (
    "sigmoid",
    "gru_gates",
    "gru_candidate",
    "gru_backward_candidate",
    "gru_backward_reset",
    "lstm_forward",
    "lstm_backward",
    "max_pool_forward",
    "max_pool_backward",
    "unfold_windows",
    "unfold_backward",
    "scatter_add_rows",
)


def load_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``.

    Raises ImportError when the compiled extension is unavailable.
    """
    if name == "python":
        return _pykernels
    if name == "cython":
        return importlib.import_module(f"{__name__}._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        load_backend("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


if os.environ.get("BISEQ_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        _impl = load_backend("cython")
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

for _name in _NAMES:
    globals()[_name] = getattr(_impl, _name)

__all__ = ["BACKEND", "available_backends", "load_backend", *_NAMES]
