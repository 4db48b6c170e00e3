"""Backend selection for the propagation kernel.

The compiled extension is used when it imports; otherwise the numpy
implementation. Set ``HGAC_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

try:
    if os.environ.get("HGAC_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _kernels_cy as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

BACKEND = "cython" if _compiled is not None else "python"
_active = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active kernel backend; returns the previous backend name."""
    global BACKEND, _active
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    previous, BACKEND, _active = BACKEND, name, BACKENDS[name]
    return previous


def propagation_forward(H, w, eps):
    return _active.propagation_forward(H, w, eps)


def propagation_backward(H, w, dv, de, gG, eps):
    return _active.propagation_backward(H, w, dv, de, gG, eps)
