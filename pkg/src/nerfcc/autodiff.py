"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Value`` wraps one numpy array and remembers which operation produced it,
so a scalar loss can be backpropagated through an arbitrary DAG of the
primitives defined here.  The primitive set is intentionally small: affine
maps, elementwise arithmetic and activations, trig, reductions, concatenation,
reshaping and a table-row gather.  Everything is float64; shapes follow numpy
broadcasting and gradients of broadcast operands are summed back to the
operand's shape.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Value",
    "GradientError",
    "ShapeMismatch",
    "constant",
    "parameter",
    "detach",
    "no_grad",
    "backward",
    "affine",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "clamp",
    "concat",
    "reshape",
    "broadcast_to",
    "comp",
    "col",
    "reduce_sum",
    "mean",
    "square_norm",
    "exclusive_cumsum",
    "gather_rows",
    "Adam",
    "AdamState",
]


class ShapeMismatch(ValueError):
    """Raised when operands of a primitive do not conform."""


class GradientError(RuntimeError):
    """Raised on misuse of the backward pass or the optimizer."""


# When False, primitives skip recording parents/backward closures entirely.
# Used for evaluation-time rendering where no gradients are needed.
_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction.

    The engine confines a graph to one execution context, so a plain module
    flag is sufficient; nested use is supported.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Value:
    """A node in the differentiation graph: float64 data plus optional grad."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self):
        return detach(self)

    def item(self):
        return float(self.data)

    # operator sugar; all arithmetic routes through the module primitives
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return powi(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data):
    """Wrap an array as a non-trainable graph leaf."""
    return Value(data, requires_grad=False)


def parameter(data):
    """Wrap an array as a trainable leaf."""
    return Value(data, requires_grad=True)


def detach(v):
    """Return a Value sharing ``v``'s data but severed from the graph.

    Consumers of the result contribute zero gradient to ``v``'s ancestors.
    """
    out = Value.__new__(Value)
    out.data = v.data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _wrap(x):
    return x if isinstance(x, Value) else Value(x)


def _make(data, parents, backward_fn):
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(node, g):
    # First contribution may be a view (reshape/broadcast backward); copy it so
    # later in-place accumulation cannot corrupt another node's buffer.
    if node.grad is None:
        node.grad = g if g.base is None and g is not node.data else g.copy()
    else:
        node.grad += g


def _unbroadcast(grad, shape):
    """Sum ``grad`` over the axes numpy broadcasting introduced for ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(
            f"{name}: operands have incompatible shapes {a.data.shape} vs {b.data.shape}"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)
    inv = 1.0 / b.data
    data = a.data * inv

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * inv, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * data * inv, b.data.shape))

    return _make(data, (a, b), bw)


def neg(a):
    a = _wrap(a)
    data = -a.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make(data, (a,), bw)


def powi(a, exponent):
    if not isinstance(exponent, (int, float)):
        raise ShapeMismatch("pow: exponent must be a python scalar")
    a = _wrap(a)
    data = a.data ** exponent

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# activations and transcendentals


def relu(a):
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0.0))

    return _make(data, (a,), bw)


def sigmoid(a):
    a = _wrap(a)
    x = a.data
    # branch form: never exponentiate a large positive argument
    data = np.empty_like(x)
    pos = x >= 0
    neg_ = ~pos
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[neg_])
    data[neg_] = e / (1.0 + e)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), bw)


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * data)

    return _make(data, (a,), bw)


def log(a):
    a = _wrap(a)
    data = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _make(data, (a,), bw)


def sin(a):
    a = _wrap(a)
    data = np.sin(a.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * np.cos(a.data))

    return _make(data, (a,), bw)


def cos(a):
    a = _wrap(a)
    data = np.cos(a.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, -g * np.sin(a.data))

    return _make(data, (a,), bw)


def sqrt(a):
    a = _wrap(a)
    data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * 0.5 / data)

    return _make(data, (a,), bw)


def clamp(a, lo, hi):
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(
            f"matmul: expected (n,k)@(k,m), got {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), bw)


def affine(x, w, b):
    """``x @ w + b`` with ``x`` (n, in), ``w`` (in, out), ``b`` (out,)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if (
        x.data.ndim != 2
        or w.data.ndim != 2
        or b.data.ndim != 1
        or x.data.shape[1] != w.data.shape[0]
        or b.data.shape[0] != w.data.shape[1]
    ):
        raise ShapeMismatch(
            "affine: expected x (n,in), w (in,out), b (out,), got "
            f"{x.data.shape}, {w.data.shape}, {b.data.shape}"
        )
    data = x.data @ w.data
    data += b.data

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)
        if w.requires_grad:
            _accumulate(w, x.data.T @ g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _make(data, (x, w, b), bw)


def transpose(a):
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose: expected a 2-d operand, got {a.data.shape}")
    data = a.data.T.copy()

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(values, axis=-1):
    values = [_wrap(v) for v in values]
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeMismatch(
            f"concat: operands do not conform along axis {axis}: "
            f"{[v.data.shape for v in values]}"
        ) from None
    sizes = [v.data.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        for v, piece in zip(values, pieces):
            if v.requires_grad:
                _accumulate(v, piece)

    return _make(data, tuple(values), bw)


def reshape(a, shape):
    a = _wrap(a)
    data = a.data.reshape(shape)
    src_shape = a.data.shape

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(src_shape))

    return _make(data, (a,), bw)


def broadcast_to(a, shape):
    a = _wrap(a)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeMismatch(
            f"broadcast_to: cannot broadcast {a.data.shape} to {shape}"
        ) from None

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))

    return _make(data, (a,), bw)


def comp(a, index):
    """Extract component ``index`` of a 1-d Value as a scalar Value."""
    a = _wrap(a)
    if a.data.ndim != 1:
        raise ShapeMismatch(f"comp: expected a 1-d operand, got {a.data.shape}")
    data = np.asarray(a.data[index])

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accumulate(a, full)

    return _make(data, (a,), bw)


def col(a, index):
    """Extract column ``index`` of a 2-d Value, keeping shape (n, 1)."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"col: expected a 2-d operand, got {a.data.shape}")
    data = a.data[:, index : index + 1].copy()

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, index : index + 1] = g
            _accumulate(a, full)

    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and scans


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    src_shape = a.data.shape

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, src_shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, src_shape).copy())

    return _make(np.asarray(data), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def square_norm(a):
    """Squared L2 norm of all elements, as a scalar Value."""
    a = _wrap(a)
    data = np.asarray(np.dot(a.data.ravel(), a.data.ravel()))

    def bw(g):
        if a.requires_grad:
            _accumulate(a, (2.0 * g) * a.data)

    return _make(data, (a,), bw)


def exclusive_cumsum(a, axis):
    """Cumulative sum along ``axis`` shifted right by one (first entry 0)."""
    a = _wrap(a)
    inclusive = np.cumsum(a.data, axis=axis)
    data = np.empty_like(inclusive)
    head = [slice(None)] * a.data.ndim
    head[axis] = slice(0, 1)
    tail = [slice(None)] * a.data.ndim
    tail[axis] = slice(0, -1)
    data[tuple(head)] = 0.0
    shifted = [slice(None)] * a.data.ndim
    shifted[axis] = slice(1, None)
    data[tuple(shifted)] = inclusive[tuple(tail)]

    def bw(g):
        if a.requires_grad:
            # d out_j / d in_i = 1 for i < j: reverse exclusive cumsum of g
            rev = np.flip(g, axis=axis)
            acc = np.cumsum(rev, axis=axis)
            grad = np.empty_like(acc)
            grad[tuple(head)] = 0.0
            grad[tuple(shifted)] = acc[tuple(tail)]
            _accumulate(a, np.flip(grad, axis=axis))

    return _make(data, (a,), bw)


def gather_rows(table, indices):
    """Select rows of a 2-d table; backward scatter-adds into the table."""
    table = _wrap(table)
    if table.data.ndim != 2:
        raise ShapeMismatch(f"gather_rows: expected a 2-d table, got {table.data.shape}")
    idx = np.asarray(indices)
    data = table.data[idx]

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            _accumulate(table, full)

    return _make(data, (table,), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Backpropagate from a scalar ``loss`` through its graph.

    Gradients accumulate additively into every reachable Value with
    ``requires_grad``; nothing is cleared here (the optimizer owns zeroing).
    """
    if loss.data.size != 1:
        raise GradientError(
            f"backward: loss must be scalar-shaped, got shape {loss.data.shape}"
        )
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment estimates and step counter for one parameter set."""

    __slots__ = ("m", "v", "step", "beta1", "beta2", "eps")

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


class Adam:
    """Adam over an explicit parameter list; learning rate passed per step."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise GradientError("Adam: all registered parameters must require grad")
        self.state = AdamState(self.params, beta1, beta2, eps)

    def step(self, lr):
        """One Adam update at learning rate ``lr``; zeroes gradients after."""
        st = self.state
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise GradientError(
                    f"Adam: parameter {i} with shape {p.data.shape} has no gradient"
                )
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
