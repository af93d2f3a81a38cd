"""Reverse-mode automatic differentiation over an append-only tape.

Every differentiable operation appends a record to the current :class:`Tape`.
Records stay alive until :func:`release_graph` drops them, which makes the
number of live records an exact, reproducible stand-in for the memory a
training step holds onto. Results that do not depend on any gradient-requiring
input are plain constants and never touch the tape.

Example
-------
>>> x = Value([2.0], requires_grad=True)
>>> y = Value([3.0], requires_grad=True)
>>> grads = backward(sum(x * y))
>>> x.grad, y.grad
(array([3.]), array([2.]))
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "GraphStats",
    "NonFiniteError",
    "ReleasedGraphError",
    "ShapeError",
    "Tape",
    "Value",
    "add",
    "backward",
    "concat",
    "constant",
    "dense",
    "dot",
    "exp",
    "finite_diff_check",
    "get_tape",
    "grad",
    "jacobian",
    "l2_normalize",
    "log",
    "log_softmax",
    "matmul",
    "matvec",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "parameter",
    "release_graph",
    "reshape",
    "scale",
    "softmax",
    "stop_gradient",
    "sub",
    "sum",
    "take_rows",
    "tanh",
    "transpose",
    "use_tape",
]


class ShapeError(ValueError):
    pass


class ReleasedGraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GraphStats:
    retained_nodes: int
    retained_elements: int
    backward_passes: int


class Tape:
    """Append-only record of live graph nodes.

    Persistent leaves (model parameters) survive :meth:`release`; everything
    else recorded since the previous release is dropped.
    """

    def __init__(self):
        self._records = []
        self._next_id = 0
        self.live_elements = 0
        self.peak_nodes = 0
        self.peak_elements = 0
        self.backward_passes = 0

    @property
    def live_node_count(self):
        return len(self._records)

    @property
    def nodes(self):
        return tuple(self._records)

    def leaf_count(self):
        return sum(1 for v in self._records if v._persistent)

    def _append(self, v, elements):
        v.node_id = self._next_id
        self._next_id += 1
        v._tape = self
        v._elements = elements
        self._records.append(v)
        self.live_elements += elements
        n = len(self._records)
        if n > self.peak_nodes:
            self.peak_nodes = n
        if self.live_elements > self.peak_elements:
            self.peak_elements = self.live_elements

    def stats(self):
        return GraphStats(len(self._records), self.live_elements, self.backward_passes)

    def peak(self):
        return GraphStats(self.peak_nodes, self.peak_elements, self.backward_passes)

    def reset_peak(self):
        self.peak_nodes = len(self._records)
        self.peak_elements = self.live_elements

    def release(self):
        snapshot = self.stats()
        keep = []
        elements = 0
        for v in self._records:
            if v._persistent:
                keep.append(v)
                elements += v._elements
            else:
                v._released = True
                v._parents = ()
                v._backward = None
        self._records = keep
        self.live_elements = elements
        return snapshot


_TAPES = [Tape()]


def get_tape():
    return _TAPES[-1]


@contextlib.contextmanager
def use_tape(tape):
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording: every result is a constant."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def release_graph(tape=None):
    """Free every non-persistent record; returns the stats seen just before."""
    return (tape or get_tape()).release()


def _as_array(data):
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value")
    return arr


class Value:
    """Array-valued graph node.

    ``Value(data)`` is a constant. ``Value(data, requires_grad=True)`` is a
    leaf recorded on the current tape; pass ``persistent=True`` (or use
    :func:`parameter`) for leaves that must survive :func:`release_graph`.
    """

    __slots__ = (
        "data",
        "grad",
        "node_id",
        "requires_grad",
        "name",
        "_parents",
        "_backward",
        "_op",
        "_tape",
        "_persistent",
        "_released",
        "_elements",
    )

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, persistent=False, name=None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._tape = None
        self._persistent = bool(persistent) and self.requires_grad
        self._released = False
        self._elements = 0
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        if self.requires_grad:
            get_tape()._append(self, self.data.size)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._op == "leaf"

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        tag = f", op={self._op}" if self._op != "leaf" else ""
        return f"Value({self.data!r}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Value):
            raise TypeError("division by a Value is not supported; use scale or mul")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def constant(data):
    return Value(data)


def parameter(data, name=None):
    return Value(data, requires_grad=True, persistent=True, name=name)


def _wrap(x):
    return x if isinstance(x, Value) else Value(x)


def _make(op, data, parents, backward_fn, saved=0):
    if not kernels.all_finite(data):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Value.__new__(Value)
    out.data = data
    out.name = None
    out.node_id = None
    out._op = op
    out._persistent = False
    out._released = False
    out._elements = 0
    out._tape = None
    tape = None
    for p in parents if _GRAD_ENABLED[-1] else ():
        if p.requires_grad:
            if p._released:
                raise ReleasedGraphError(f"{op}: input belongs to a released graph segment")
            if tape is None:
                tape = p._tape
            elif p._tape is not tape:
                raise ValueError(f"{op}: parents live on different tapes")
    if tape is None:
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "leaf"
        return out
    out.requires_grad = True
    out.grad = None
    out._parents = tuple(parents)
    out._backward = backward_fn
    tape._append(out, data.size + saved)
    return out


# ---------------------------------------------------------------------------
# stop-gradient, with a record/replay hook used by finite_diff_check

class _StopGradReplay:
    def __init__(self):
        self.values = []
        self.recording = True
        self.cursor = 0

    def handle(self, data):
        if self.recording:
            self.values.append(data.copy())
            return data
        if self.cursor >= len(self.values):
            raise RuntimeError("stop_gradient replay: more detach points than recorded")
        out = self.values[self.cursor]
        self.cursor += 1
        return out


_SG_REPLAY = None


def stop_gradient(x):
    """Value-preserving detach: same data, no parent edge, zero gradient."""
    x = _wrap(x)
    data = x.data
    if _SG_REPLAY is not None:
        data = _SG_REPLAY.handle(data)
    return Value(data.copy())


sg = stop_gradient


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _binary_shapes(op, a, b):
    if a.shape == b.shape:
        return None
    if a.data.ndim == 0:
        return "a"
    if b.data.ndim == 0:
        return "b"
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    bc = _binary_shapes("add", a, b)

    def bw(g):
        ga = g.sum() if bc == "a" else g
        gb = g.sum() if bc == "b" else g
        return ga, gb

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    bc = _binary_shapes("sub", a, b)

    def bw(g):
        ga = g.sum() if bc == "a" else g
        gb = -g.sum() if bc == "b" else -g
        return ga, gb

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    bc = _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g * bd if a.requires_grad else None
        gb = g * ad if b.requires_grad else None
        if bc == "a" and ga is not None:
            ga = ga.sum()
        if bc == "b" and gb is not None:
            gb = gb.sum()
        return ga, gb

    return _make("mul", ad * bd, (a, b), bw, saved=ad.size + bd.size)


def neg(a):
    a = _wrap(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, s):
    """Multiply by a fixed Python/NumPy scalar."""
    a = _wrap(a)
    s = float(s)
    return _make("scale", a.data * s, (a,), lambda g: (g * s,))


def tanh(a):
    a = _wrap(a)
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a):
    a = _wrap(a)
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a):
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive input")
    x = a.data
    return _make("log", np.log(x), (a,), lambda g: (g / x,), saved=x.size)


# ---------------------------------------------------------------------------
# reductions

def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = _wrap(a)
    shape = a.shape
    return _make("sum", np.asarray(a.data.sum(axis=axis)), (a,), lambda g: (_expand(g, shape, axis),))


def mean(a, axis=None):
    a = _wrap(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    return _make(
        "mean",
        np.asarray(a.data.mean(axis=axis)),
        (a,),
        lambda g: (_expand(g, shape, axis) / n,),
    )


def dot(a, b):
    """Inner product over the last axis: (n,)·(n,) -> () or (B,n)·(B,n) -> (B,)."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        g = np.expand_dims(g, -1)
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return _make("dot", np.asarray((ad * bd).sum(axis=-1)), (a, b), bw, saved=ad.size + bd.size)


# ---------------------------------------------------------------------------
# linear algebra

def matvec(W, x):
    """``W @ x`` for a vector, or row-wise ``x @ W.T`` for a (B, n) batch."""
    W, x = _wrap(W), _wrap(x)
    if W.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"matvec: incompatible shapes {W.shape} and {x.shape}")
    Wd, xd = W.data, x.data
    y = Wd @ xd if xd.ndim == 1 else xd @ Wd.T

    def bw(g):
        if xd.ndim == 1:
            gW = np.outer(g, xd) if W.requires_grad else None
        else:
            gW = g.T @ xd if W.requires_grad else None
        gx = g @ Wd if x.requires_grad else None
        return gW, gx

    return _make("matvec", y, (W, x), bw, saved=Wd.size + xd.size)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make("matmul", ad @ bd, (a, b), bw, saved=ad.size + bd.size)


def reshape(a, shape):
    a = _wrap(a)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make("reshape", y, (a,), lambda g: (g.reshape(old),))


def transpose(a):
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def concat(values, axis=-1):
    values = [_wrap(v) for v in values]
    if not values:
        raise ShapeError("concat of nothing")
    ndim = values[0].data.ndim
    ax = axis % ndim
    ref = values[0].shape[:ax] + values[0].shape[ax + 1:]
    for v in values:
        if v.data.ndim != ndim or v.shape[:ax] + v.shape[ax + 1:] != ref:
            raise ShapeError("concat: shapes differ off the concatenation axis")
    sizes = [v.shape[ax] for v in values]
    cuts = np.cumsum(sizes)[:-1]

    bounds = list(zip([0, *cuts], [*cuts, None]))

    def bw(g):
        return tuple(g[(slice(None),) * ax + (slice(a, b),)] for a, b in bounds)

    return _make("concat", np.concatenate([v.data for v in values], axis=ax), tuple(values), bw)


def take_rows(table, idx):
    """Gather ``table[idx]`` for an integer index array."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.intp)
    if table.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("take_rows: index out of range")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make("take_rows", table.data[idx], (table,), bw)


def dense(x, W, b, activation="tanh"):
    """Fused ``activation(x @ W.T + b)`` backed by the compiled kernels."""
    x, W, b = _wrap(x), _wrap(W), _wrap(b)
    act = kernels.TANH if activation == "tanh" else kernels.IDENTITY
    if activation not in ("tanh", None, "identity"):
        raise ValueError(f"unknown activation {activation!r}")
    vec = x.data.ndim == 1
    xd = x.data[None, :] if vec else x.data
    if xd.ndim != 2 or W.data.ndim != 2 or xd.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: incompatible shapes x{x.shape} W{W.shape} b{b.shape}")
    y = kernels.dense_forward(xd, W.data, b.data, act)
    Wd = W.data

    def bw(g):
        g2 = g[None, :] if vec else g
        gx, gW, gb = kernels.dense_backward(g2, xd, Wd, y, act, need_gx=x.requires_grad)
        if gx is not None and vec:
            gx = gx[0]
        return gx, gW, gb

    return _make("dense", y[0] if vec else y, (x, W, b), bw, saved=xd.size)


# ---------------------------------------------------------------------------
# normalisation

def softmax(a, axis=-1):
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (a,), bw)


def log_softmax(a, axis=-1):
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (a,), bw, saved=p.size)


def l2_normalize(a, axis=-1):
    a = _wrap(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise NonFiniteError("l2_normalize of a zero vector")
    y = a.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (a,), bw, saved=norm.size)


# ---------------------------------------------------------------------------
# gradient propagation

def _propagate(root, seed):
    if root._released:
        raise ReleasedGraphError("root belongs to a released graph segment")
    if not root.requires_grad:
        return {}
    order = []
    seen = {root}
    stack = [root]
    while stack:
        v = stack.pop()
        order.append(v)
        for p in v._parents:
            if p.requires_grad and p not in seen:
                if p._released:
                    raise ReleasedGraphError("backward reached a released graph segment")
                seen.add(p)
                stack.append(p)
    order.sort(key=lambda v: v.node_id, reverse=True)
    grads = {root: np.array(seed, dtype=np.float64)}
    leaves = {}
    for v in order:
        g = grads.pop(v, None)
        if g is None:
            continue
        if v._op == "leaf":
            leaves[v] = g
            continue
        for p, pg in zip(v._parents, v._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
    root._tape.backward_passes += 1
    return leaves


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad``; returns the gradient map."""
    root = _wrap(root)
    if root.data.size != 1 or root.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    leaves = _propagate(root, np.ones_like(root.data))
    for leaf, g in leaves.items():
        leaf.grad += g.reshape(leaf.shape)
    return leaves


def grad(root, wrt, seed=None):
    """Vector-Jacobian product of ``root`` onto ``wrt`` without touching ``.grad``.

    ``seed`` defaults to ones for a scalar root and is required otherwise.
    Returns one array per entry of ``wrt`` (zeros where no path exists).
    """
    if seed is None:
        if root.data.size != 1:
            raise ShapeError("grad of a non-scalar root needs an explicit seed")
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != root.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match root {root.shape}")
    leaves = _propagate(root, seed) if root.requires_grad else {}
    return [leaves.get(w, np.zeros_like(w.data)).reshape(w.shape) for w in wrt]


def jacobian(output, wrt):
    """Dense Jacobian d(output)/d(wrt) of shape (output.size, wrt.size).

    Built from one backward pass per output element, so only affordable at
    toy dimensions.
    """
    m = output.size
    J = np.zeros((m, wrt.size))
    basis = np.zeros(m)
    for i in range(m):
        basis[i] = 1.0
        (g,) = grad(output, [wrt], basis.reshape(output.shape))
        J[i] = g.ravel()
        basis[i] = 0.0
    return J


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_check(f, params, epsilon=1e-5, max_entries=None, seed=0):
    """Largest relative error between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar Value built from
    ``params``. Detach points are recorded on the analytic pass and replayed
    on the perturbed passes, so stop-gradient inputs are held constant exactly
    as the analytic gradient assumes. ``max_entries`` caps the number of
    coordinates probed (sampled with ``seed``).
    """
    global _SG_REPLAY
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    replay = _StopGradReplay()
    prev = _SG_REPLAY
    _SG_REPLAY = replay
    try:
        root = f()
        if root.data.size != 1:
            raise ShapeError("finite_diff_check needs a scalar function")
        if not np.all(np.isfinite(root.data)):
            raise NonFiniteError("function value is not finite")
        analytic = grad(root, params)
        replay.recording = False

        def evaluate():
            replay.cursor = 0
            with no_grad():
                out = float(f().data)
            if not np.isfinite(out):
                raise NonFiniteError("function value is not finite")
            return out

        coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
        if max_entries is not None and len(coords) > max_entries:
            rng = np.random.default_rng(seed)
            pick = rng.choice(len(coords), size=max_entries, replace=False)
            coords = [coords[k] for k in sorted(pick)]
        worst = 0.0
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = evaluate()
            flat[j] = orig - epsilon
            fm = evaluate()
            flat[j] = orig
            cd = (fp - fm) / (2.0 * epsilon)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-12)
            worst = max(worst, err)
        return worst
    finally:
        _SG_REPLAY = prev
