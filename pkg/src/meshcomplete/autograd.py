"""A small reverse-mode differentiation engine over dense float64 numpy arrays.

Every kernel returns a :class:`Tensor` that remembers its inputs and a rule for
pulling an output gradient back to them. :func:`backward` walks that record in
reverse topological order and accumulates into :class:`Parameter` gradients.
"""
from __future__ import annotations

import json
import math
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "einsum",
    "scale",
    "softmax",
    "exp",
    "log",
    "elu",
    "sum",
    "mean",
    "gather_rows",
    "scatter_add_rows",
    "l2_norm",
    "reshape",
    "transpose",
    "backward",
    "zero_grad",
    "Adam",
    "SGD",
    "save_checkpoint",
    "load_checkpoint",
    "debug_mode",
]

CHECKPOINT_VERSION = 1

# full per-kernel finiteness check; exp and log are always checked since they are
# the kernels that turn finite inputs into inf/nan
_DEBUG = False


class ShapeError(ValueError):
    """Kernel inputs have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or inf."""


@contextmanager
def debug_mode(enabled=True):
    """Toggle the per-kernel non-finite check inside a ``with`` block."""
    global _DEBUG
    previous = _DEBUG
    _DEBUG = enabled
    try:
        yield
    finally:
        _DEBUG = previous


class Tensor:
    """A dense array node in the differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False
        # which parents needed gradients when this node was recorded
        self._needs = tuple(p.requires_grad for p in _parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Tensor division is only defined for scalars")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor with a persistent gradient buffer."""

    def __init__(self, value, name=""):
        super().__init__(np.array(value, dtype=np.float64, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"

    def zero_grad(self):
        self.grad[...] = 0.0

    def assign(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to parameter {self.name!r} of shape {self.shape}")
        self.data[...] = value


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op, check=False):
    if (check or _DEBUG) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def back(g):
        return (g @ B.T if need_a else None), (A.T @ g if need_b else None)

    return _node(A @ B, (a, b), back, "matmul")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def back(g):
        return (_unbroadcast(g * B, A.shape) if need_a else None,
                _unbroadcast(g * A, B.shape) if need_b else None)

    return _node(A * B, (a, b), back, "mul")


def einsum(subscripts, a, b):
    """Two-operand ``numpy.einsum`` without repeated indices inside one operand."""
    a, b = as_tensor(a), as_tensor(b)
    inputs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    if len(sa) != a.data.ndim or len(sb) != b.data.ndim:
        raise ShapeError(f"einsum: subscripts {subscripts!r} for shapes {a.shape} and {b.shape}")
    for s_ in (sa, sb):
        if len(set(s_)) != len(s_):
            raise ShapeError(f"einsum: repeated index in {s_!r}")
    try:
        out = np.einsum(subscripts, a.data, b.data, optimize=False)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts!r}: {exc}") from None
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def _pull(g, other, s_other, s_target, shape):
        # indices of the target that appear in neither g nor the other operand were summed
        # in the forward pass; they come back through broadcasting
        avail = set(out_sub) | set(s_other)
        kept = "".join(c for c in s_target if c in avail)
        r = np.einsum(f"{out_sub},{s_other}->{kept}", g, other, optimize=False)
        if kept != s_target:
            r = np.expand_dims(r, [i for i, c in enumerate(s_target) if c not in avail])
            r = np.broadcast_to(r, shape).copy()
        return r

    def back(g):
        return (_pull(g, B, sb, sa, A.shape) if need_a else None,
                _pull(g, A, sa, sb, B.shape) if need_b else None)

    return _node(out, (a, b), back, "einsum")


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,), "scale")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp", check=True)


def log(a):
    a = as_tensor(a)
    A = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(A)
    return _node(out, (a,), lambda g: (g / A,), "log", check=True)


def elu(a, alpha=1.0):
    a = as_tensor(a)
    A = a.data
    neg = A < 0
    ex = np.exp(np.minimum(A, 0.0))
    out = np.where(neg, alpha * (ex - 1.0), A)

    def back(g):
        return (g * np.where(neg, alpha * ex, 1.0),)

    return _node(out, (a,), back, "elu")


def softmax(a, axis=-1):
    """Softmax along ``axis`` with the running max subtracted first."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), back, "softmax")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return scale(sum(a, axes, keepdims), 1.0 / count)


def _segment_matrix(index, n_rows):
    m = len(index)
    return sparse.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n_rows, m))


def _segment_sum(values, index, n_rows):
    """``out[index[k]] += values[k]`` for all rows ``k``."""
    flat = values.reshape(len(index), -1)
    out = _segment_matrix(index, n_rows) @ flat
    return np.asarray(out).reshape((n_rows,) + values.shape[1:])


def gather_rows(a, index):
    """Rows ``a[index]``; the index is a constant integer array."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= n)):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    return _node(a.data[index], (a,), lambda g: (_segment_sum(g, index, n),), "gather_rows")


def scatter_add_rows(a, index, n_rows):
    """Zero array with ``n_rows`` rows where row ``k`` of ``a`` is added at ``index[k]``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (a.shape[0],):
        raise ShapeError(f"scatter_add_rows: index of shape {index.shape} for input {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ShapeError(f"scatter_add_rows: index out of range [0, {n_rows})")
    return _node(_segment_sum(a.data, index, n_rows), (a,), lambda g: (g[index],), "scatter_add_rows")


def l2_norm(a, axis=None):
    """Euclidean norm over ``axis`` (all entries by default).

    The gradient at a zero norm is taken to be zero.
    """
    a = as_tensor(a)
    A = a.data
    axes = _norm_axes(axis, A.ndim)
    n = np.sqrt((A * A).sum(axis=axes))

    def back(g):
        nk = np.expand_dims(n, axes)
        gk = np.expand_dims(g, axes)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(nk > 0, A / nk, 0.0)
        return (gk * r,)

    return _node(n, (a,), back, "l2_norm")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


# ---------------------------------------------------------------------------
# Reverse sweep
# ---------------------------------------------------------------------------

def _topological(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p, need in zip(node._parents, node._needs):
            if need and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(parameter) into every reachable :class:`Parameter`.

    A recorded graph can be swept once; run a fresh forward pass before the next call.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already called on this graph; recompute the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, need, pg in zip(node._parents, node._needs, node._backward(g)):
            if pg is None or not need:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        # free the closure so a stale graph cannot be swept again
        node._backward = None
        node._consumed = True


def zero_grad(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGD:
    """Plain gradient descent, ``value -= lr * grad``, with optional momentum."""

    kind = "sgd"

    def __init__(self, params, lr=0.1, momentum=0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.learning_rate = lr
        self.momentum = momentum
        self.step_count = 0
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        for p, vel in zip(self.params, self._velocity):
            if self.momentum:
                vel *= self.momentum
                vel += p.grad
                p.data -= self.learning_rate * vel
            else:
                p.data -= self.learning_rate * p.grad
            p.zero_grad()


class Adam:
    """ADAM with bias-corrected first and second moment estimates."""

    kind = "adam"

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.learning_rate = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            p.zero_grad()

    def state_dict(self):
        return {
            "kind": self.kind, "learning_rate": self.learning_rate, "beta1": self.beta1,
            "beta2": self.beta2, "epsilon": self.epsilon, "step_count": self.step_count,
        }


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, tensors, metadata=None):
    """Write ``name -> array`` as JSON; float repr makes the round trip bit-exact."""
    payload = {"format": "meshcomplete-checkpoint", "version": CHECKPOINT_VERSION, "tensors": {}}
    if metadata:
        payload["metadata"] = metadata
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"refusing to checkpoint non-finite tensor {name!r}")
        payload["tensors"][name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path):
    """Returns ``(tensors, metadata)``."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "meshcomplete-checkpoint":
        raise ValueError(f"{path} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    tensors = {
        name: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
        for name, t in payload["tensors"].items()
    }
    return tensors, payload.get("metadata", {})
