"""NumPy implementation of the fused dense-layer kernels.

Used when the compiled ``_kernels`` extension is unavailable or disabled via
``STEPTUNE_PURE_PYTHON=1``. Signatures and results match the extension up to
floating-point summation order.
"""

import numpy as np

IDENTITY = 0
TANH = 1


def dense_forward(x, W, b, act):
    y = x @ W.T
    y += b
    if act == TANH:
        np.tanh(y, out=y)
    return y


def dense_backward(gy, x, W, y, act, need_gx=True):
    if act == TANH:
        gpre = gy * (1.0 - y * y)
    else:
        gpre = gy
    gx = gpre @ W if need_gx else None
    gW = gpre.T @ x
    gb = gpre.sum(axis=0)
    return gx, gW, gb


def all_finite(a):
    return bool(np.isfinite(a).all())


def adam_update(g, m, v, p, lr, beta1, beta2, c1, c2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
