"""Backend selection for the fused dense-layer kernels.

The compiled extension is preferred; set ``STEPTUNE_PURE_PYTHON=1`` before
import to force the NumPy fallback (used by the benchmark and by tests that
compare both backends).
"""

import os

import numpy as np

from . import _kernels_py

IDENTITY = _kernels_py.IDENTITY
TANH = _kernels_py.TANH

_compiled = None
if os.environ.get("STEPTUNE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "compiled" if _compiled is not None else "python"


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def dense_forward(x, W, b, act):
    return _impl.dense_forward(_c64(x), _c64(W), _c64(b), int(act))


def dense_backward(gy, x, W, y, act, need_gx=True):
    return _impl.dense_backward(_c64(gy), _c64(x), _c64(W), _c64(y), int(act), bool(need_gx))


def all_finite(a):
    return _impl.all_finite(_c64(a).reshape(-1))


def _flat_view(a):
    if isinstance(a, np.ndarray) and a.dtype == np.float64 and a.flags.c_contiguous \
            and a.flags.writeable:
        return a.reshape(-1)
    return None


def adam_update(g, m, v, p, lr, beta1, beta2, c1, c2, eps):
    """Update ``m``, ``v`` and ``p`` in place. ``g`` may have any layout."""
    views = [_flat_view(a) for a in (m, v, p)]
    if any(x is None for x in views):
        _kernels_py.adam_update(g, m, v, p, lr, beta1, beta2, c1, c2, eps)
        return
    _impl.adam_update(_c64(g).reshape(-1), *views, float(lr), float(beta1), float(beta2),
                      float(c1), float(c2), float(eps))


def get_backend(name):
    """Return the kernel module for ``"compiled"`` or ``"python"``."""
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")
