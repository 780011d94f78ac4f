"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive computes its value with numpy and, when a :class:`Tape` is
active and at least one operand is tracked, records a node holding the
parents and a closure that maps the output gradient to parent gradients.
Composite operations (attention kernels, the transformer block) are built
from these primitives, so their gradients are never hand-derived.

Primitives also report their arithmetic cost to any active
:func:`count_flops` context.  The convention mirrors the closed-form cost
model in :mod:`mgk.complexity`: a length-``k`` contraction costs ``k``
multiplications and ``k - 1`` additions, a same-shape addition or
Hadamard product costs one operation per element, reductions cost one
addition per folded element, and elementwise kernel evaluation
(exponentials, logs, divisions, scalar scaling, broadcast shifts and the
softmax normalization itself) is free.
"""

import contextlib
from collections import Counter, namedtuple

import numpy as np

from .exceptions import ContractError, DegenerateRowError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "FlopCounter",
    "count_flops",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "relu",
    "feature_map",
    "maximum",
    "tsum",
    "mean",
    "cumsum",
    "softmax_rows",
    "normalize",
    "pairwise_sqdist",
    "concat",
    "slice_axis",
    "reshape",
    "swapaxes",
    "layer_norm",
    "embedding",
    "cross_entropy",
]

_TAPES = []
_COUNTERS = []

Node = namedtuple("Node", ["op", "out", "parents", "backward"])


class Tensor:
    """Immutable float64 array, optionally tracked for differentiation.

    Parameters
    ----------
    data : array_like
        Values; copied and converted to float64.
    requires_grad : bool, default=False
        Mark the tensor as a leaf whose gradient :func:`backward` reports.
    name : str, optional
        Label used in gradient reports.
    """

    __slots__ = ("_data", "requires_grad", "name", "_tape", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr):
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        out._data = arr
        out.requires_grad = False
        out.name = None
        out._tape = None
        out._node = None
        return out

    @property
    def data(self):
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def ndim(self):
        return self._data.ndim

    @property
    def size(self):
        return self._data.size

    @property
    def grad_id(self):
        """Position of this tensor's node on its tape, or None for leaves."""
        return self._node

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def numpy(self):
        return self._data.copy()

    def item(self):
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float(self._data)

    def _assign(self, values):
        # Only optimizers and finite-difference probes replace parameter values.
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self._data.shape:
            raise DimensionError(f"cannot assign shape {arr.shape} to tensor of shape {self._data.shape}")
        arr.setflags(write=False)
        self._data = arr

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside the block on
    tracked tensors are appended in execution order, which is a valid
    topological order by construction.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, out, parents, backward_fn):
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(Node(op, out, parents, backward_fn))


class FlopCounter:
    """Accumulates operation counts charged by primitives."""

    def __init__(self):
        self.total = 0
        self.by_op = Counter()

    def charge(self, op, n):
        self.total += int(n)
        self.by_op[op] += int(n)


@contextlib.contextmanager
def count_flops():
    """Count multiplications and additions executed inside the block."""
    counter = FlopCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op, data, parents, backward_fn, flops=0):
    if flops:
        for counter in _COUNTERS:
            counter.charge(op, flops)
    out = Tensor._wrap(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].record(op, out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss, wrt=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Parameters
    ----------
    loss : Tensor
        Scalar produced on an active tape.
    wrt : sequence of Tensor, optional
        Leaves to report.  Leaves the loss does not depend on receive zeros.
        When omitted, every tracked leaf reached by the sweep is reported.

    Returns
    -------
    dict
        Mapping from leaf tensor to gradient array of the same shape.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward requires a scalar loss, got shape {shape}")
    grads = {}
    leaves = {}
    if loss._tape is not None:
        nodes = loss._tape.nodes
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(nodes[: loss._node + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    if parent._tape is None:
                        leaves[key] = parent
    elif loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        leaves[id(loss)] = loss
    elif wrt is None:
        raise ContractError("loss is not reachable from any tracked leaf; compute it inside a Tape")
    if wrt is None:
        return {t: np.asarray(grads[k], dtype=np.float64).reshape(t.shape) for k, t in leaves.items()}
    return {
        t: (np.asarray(grads[id(t)], dtype=np.float64).reshape(t.shape) if id(t) in grads else np.zeros(t.shape))
        for t in wrt
    }


# ---------------------------------------------------------------- contractions


def matmul(a, b):
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    flops = int(np.prod(batch, dtype=np.int64)) * m * n * (2 * k - 1) if k else 0
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM over the flattened batch instead of a stacked loop
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def bwd_flat(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result("matmul", out, (a, b), bwd_flat, flops)
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result("matmul", out, (a, b), bwd, flops)


def pairwise_sqdist(q, k):
    """Squared Euclidean distances between the rows of ``q`` and ``k``.

    Charged as one length-``D`` contraction per pair, the same cost as a
    dot-product score.  When ``q`` and ``k`` are the same tensor the
    diagonal is exactly zero.
    """
    q, k = _as_tensor(q), _as_tensor(k)
    if q.ndim < 2 or k.ndim < 2 or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"pairwise_sqdist feature mismatch: {q.shape} vs {k.shape}")
    batch = np.broadcast_shapes(q.shape[:-2], k.shape[:-2])
    n, n2, d = q.shape[-2], k.shape[-2], q.shape[-1]
    flops = int(np.prod(batch, dtype=np.int64)) * n * n2 * (2 * d - 1) if d else 0
    gram = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    if q is k:
        qn = kn = np.einsum("...ii->...i", gram)
    else:
        qn = np.einsum("...i,...i->...", q.data, q.data)
        kn = np.einsum("...i,...i->...", k.data, k.data)
    out = gram * -2.0
    out += qn[..., :, None]
    out += kn[..., None, :]
    np.maximum(out, 0.0, out=out)

    def bwd(g):
        gq = 2.0 * (q.data * g.sum(axis=-1)[..., None] - np.matmul(g, k.data))
        gk = 2.0 * (k.data * g.sum(axis=-2)[..., None] - np.matmul(np.swapaxes(g, -1, -2), q.data))
        return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape)

    return _result("sqdist", out, (q, k), bwd, flops)


# ----------------------------------------------------------------- elementwise


def _binary_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "add")
    flops = a.size if a.shape == b.shape else 0

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bwd, flops)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "sub")
    flops = a.size if a.shape == b.shape else 0

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), bwd, flops)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "mul")
    flops = a.size if a.shape == b.shape else 0

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), bwd, flops)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "div")
    out = a.data / b.data

    def bwd(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result("div", out, (a, b), bwd)


def neg(a):
    a = _as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = _as_tensor(a)
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _result("relu", out, (a,), lambda g: (g * (out > 0),))


def feature_map(a):
    """Strictly positive map ``u + 1`` for ``u >= 0`` and ``exp(u)`` otherwise."""
    a = _as_tensor(a)
    pos = a.data >= 0
    ex = np.exp(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data + 1.0, ex)
    return _result("feature_map", out, (a,), lambda g: (g * np.where(pos, 1.0, ex),))


def maximum(a, b):
    """Elementwise maximum; ties and the gradient go to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"maximum shape mismatch: {a.shape} vs {b.shape}")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _result("maximum", out, (a, b), lambda g: (g * take_a, g * ~take_a))


# ------------------------------------------------------------------ reductions


def tsum(a, axis=None, keepdims=False):
    """Sum over ``axis`` (all axes when None)."""
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    flops = a.size - np.size(out)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", out, (a,), bwd, flops)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum(a, axis):
    a = _as_tensor(a)
    out = np.cumsum(a.data, axis=axis)
    flops = a.size - a.size // a.shape[axis] if a.shape[axis] else 0

    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _result("cumsum", out, (a,), bwd, flops)


def softmax_rows(s, mask=None):
    """Row softmax over the last axis, stabilized by row-max subtraction.

    Parameters
    ----------
    s : Tensor
        Scores of shape ``(..., m, n)``.
    mask : array_like of bool, optional
        Broadcastable to ``s``; False entries are excluded from both the
        numerator and the normalizer and come out exactly zero.

    Raises
    ------
    DegenerateRowError
        If some row has no unmasked entry.
    """
    s = _as_tensor(s)
    x = s.data
    n_rows = int(np.prod(x.shape[:-1], dtype=np.int64))
    if n_rows and x.shape[-1] == 0:
        raise DegenerateRowError("softmax over an empty row")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool), x.shape)
        if x.size and not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has no unmasked entry")
        x = np.where(mask, x, -np.inf)
    if x.size == 0:
        out = np.zeros(x.shape)
    else:
        out = x - x.max(axis=-1, keepdims=True)
        np.exp(out, out=out)
        out /= out.sum(axis=-1, keepdims=True)

    def bwd(g):
        gx = g - np.einsum("...i,...i->...", g, out)[..., None]
        gx *= out
        return (gx,)

    return _result("softmax", out, (s,), bwd)


def normalize(a):
    """Divide a non-negative vector by its sum (a normalization, so uncharged)."""
    a = _as_tensor(a)
    total = a.data.sum()
    if not total > 0:
        raise DegenerateRowError("cannot normalize weights with non-positive sum")
    out = a.data / total

    def bwd(g):
        return ((g - np.sum(g * out)) / total,)

    return _result("normalize", out, (a,), bwd)


# --------------------------------------------------------------------- shaping


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", out, tuple(tensors), bwd)


def slice_axis(a, start, stop, axis=-1):
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bwd(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _result("slice", a.data[index], (a,), bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1, ax2):
    a = _as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return _result("swapaxes", out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


# ---------------------------------------------------------------- model pieces


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    n = x.shape[-1]
    xhat = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.einsum("...i,...i->...", xhat, xhat)[..., None] / n + eps)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def bwd(g):
        gx_hat = g * gamma.data
        gx = gx_hat * n
        gx -= gx_hat.sum(-1, keepdims=True)
        gx -= xhat * np.einsum("...i,...i->...", gx_hat, xhat)[..., None]
        gx *= inv / n
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result("layer_norm", out, (x, gamma, beta), bwd)


def embedding(table, ids):
    """Row lookup ``table[ids]``; ``ids`` is an integer array."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bwd(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        return (full,)

    return _result("embedding", table.data[ids], (table,), bwd)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (B, C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    if logits.shape[0] == 0:
        raise ContractError("cross_entropy over an empty batch")
    x = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(x).sum(axis=1, keepdims=True))
    logp = x - logz
    rows = np.arange(labels.shape[0])
    loss = -logp[rows, labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / labels.shape[0],)

    return _result("cross_entropy", np.asarray(loss), (logits,), bwd)
