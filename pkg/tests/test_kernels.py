import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steptune import kernels

compiled_available = True
try:
    kernels.get_backend("compiled")
except ImportError:
    compiled_available = False

needs_compiled = pytest.mark.skipif(not compiled_available, reason="extension not built")


def case(seed, n, fin, fout):
    r = np.random.default_rng(seed)
    return (r.standard_normal((n, fin)), r.standard_normal((fout, fin)),
            r.standard_normal(fout), r.standard_normal((n, fout)))


def test_python_backend_matches_numpy_reference():
    x, W, b, _ = case(0, 5, 4, 3)
    py = kernels.get_backend("python")
    np.testing.assert_allclose(py.dense_forward(x, W, b, kernels.TANH), np.tanh(x @ W.T + b))
    np.testing.assert_allclose(py.dense_forward(x, W, b, kernels.IDENTITY), x @ W.T + b)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@needs_compiled
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9),
       st.sampled_from([kernels.IDENTITY, kernels.TANH]), st.booleans())
def test_backends_agree(seed, n, fin, fout, act, need_gx):
    x, W, b, gy = case(seed, n, fin, fout)
    c, p = kernels.get_backend("compiled"), kernels.get_backend("python")
    yc, yp = c.dense_forward(x, W, b, act), p.dense_forward(x, W, b, act)
    np.testing.assert_allclose(yc, yp, rtol=1e-12, atol=1e-12)
    gc, gp = c.dense_backward(gy, x, W, yc, act, need_gx), p.dense_backward(gy, x, W, yp, act, need_gx)
    for a, b_ in zip(gc, gp):
        if a is None or b_ is None:
            assert a is None and b_ is None and not need_gx
        else:
            np.testing.assert_allclose(a, b_, rtol=1e-12, atol=1e-12)


@needs_compiled
def test_compiled_accepts_read_only_inputs():
    x, W, b, _ = case(1, 3, 2, 2)
    for a in (x, W, b):
        a.setflags(write=False)
    y = kernels.get_backend("compiled").dense_forward(x, W, b, kernels.TANH)
    np.testing.assert_allclose(y, np.tanh(x @ W.T + b))


def test_dispatch_casts_non_contiguous():
    x, W, b, _ = case(2, 4, 3, 2)
    y = kernels.dense_forward(np.asfortranarray(x), W.T.copy().T, b, kernels.TANH)
    np.testing.assert_allclose(y, np.tanh(x @ W.T + b))


def test_env_var_forces_fallback():
    env = dict(os.environ, STEPTUNE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import steptune.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_default_backend_is_compiled():
    assert kernels.BACKEND == "compiled"


@needs_compiled
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 300), st.integers(1, 5),
       st.floats(1e-5, 0.1))
def test_adam_update_matches_python(seed, n, k, lr):
    r = np.random.default_rng(seed)
    g = r.standard_normal(n)
    m, v, p = r.standard_normal(n), r.random(n), r.standard_normal(n)
    c1, c2 = 1 - 0.9 ** k, 1 - 0.999 ** k
    out = {}
    for name in ("python", "compiled"):
        state = [m.copy(), v.copy(), p.copy()]
        kernels.get_backend(name).adam_update(g, *state, lr, 0.9, 0.999, c1, c2, 1e-8)
        out[name] = state
    for a, b in zip(out["python"], out["compiled"]):
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)


def test_adam_update_handles_non_contiguous_targets():
    r = np.random.default_rng(0)
    base = r.standard_normal((4, 6))
    g = r.standard_normal((4, 3))
    m, v = np.zeros((4, 3)), np.zeros((4, 3))
    p = base[:, ::2]
    expect = p.copy()
    kernels.get_backend("python").adam_update(g, np.zeros((4, 3)), np.zeros((4, 3)), expect,
                                              0.1, 0.9, 0.999, 0.1, 0.001, 1e-8)
    kernels.adam_update(g, m, v, p, 0.1, 0.9, 0.999, 0.1, 0.001, 1e-8)
    np.testing.assert_allclose(base[:, ::2], expect, rtol=1e-14)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_all_finite_backends(bad):
    a = np.arange(12.0).reshape(3, 4)
    names = ["python"] + (["compiled"] if compiled_available else [])
    for name in names:
        mod = kernels.get_backend(name)
        assert mod.all_finite(a.ravel())
        b = a.copy()
        b[2, 1] = bad
        assert not mod.all_finite(b.ravel())
    with np.errstate(invalid="ignore"):
        strided = a[:, ::2] * bad
    assert kernels.all_finite(np.float64(3.0)) and not kernels.all_finite(strided)
    assert kernels.all_finite(np.zeros(0))
