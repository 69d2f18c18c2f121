"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built implicitly: every operation returns a Tensor holding its
numpy payload, references to its parents, and a closure that routes the
incoming gradient to them. Shapes must match exactly except for one
deliberate relaxation: elementwise add/sub/mul accept an operand whose shape
is a trailing suffix of the other's (bias vectors, shared masks). There is no
other broadcasting.

All payloads are float64 and, in checked mode (the default), rejected at
construction if they contain NaN/Inf.

Threading: graph construction and backward passes are single-threaded;
operations never mutate their inputs, so tensor values may be shared
read-only across threads. Parameter updates happen between steps only.
"""

from __future__ import annotations

import math

import numpy as np

from dynakv import linalg
from dynakv.errors import DimensionError

_checked = True


def set_checked(flag):
    """Toggle NaN/Inf rejection at Tensor construction. Returns the old flag."""
    global _checked
    prev = _checked
    _checked = bool(flag)
    return prev


def checked_mode():
    return _checked


class Tensor:
    """One node of the reverse-mode graph: value, lazy grad, parent links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if _checked and arr.size and not np.isfinite(arr).all():
            raise ValueError("tensor holds non-finite entries")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def slice(self, axis, start, stop):
        return slice_along(self, axis, start, stop)

    def backward(self, grad=None):
        """Accumulate gradients of this node w.r.t. every reachable parent."""
        if grad is None:
            if self.data.ndim != 0:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones((), dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise DimensionError(
                f"gradient seed shape {grad.shape} != value shape {self.data.shape}")
        _accumulate(self, grad)
        for node in reversed(_topo_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t.grad += g


def _make(data, parents, backward):
    """Build an op result; constant-fold when nothing upstream needs grads."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _suffix_of(small, big):
    n = len(small)
    return n <= len(big) and tuple(big[len(big) - n:]) == tuple(small)


def _reduce_to(g, shape):
    """Sum the leading axes of g away so it matches a trailing-suffix shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _ew_shapes(a, b, opname):
    if a.shape == b.shape:
        return
    if _suffix_of(b.shape, a.shape) or _suffix_of(a.shape, b.shape):
        return
    raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are neither equal "
                         "nor trailing-suffix compatible")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    _ew_shapes(a, b, "add")
    out = _make(a.data + b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g, b.shape))

    if out._parents:
        out._backward = backward
    return out


def sub(a, b):
    _ew_shapes(a, b, "sub")
    out = _make(a.data - b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(-g, b.shape))

    if out._parents:
        out._backward = backward
    return out


def mul(a, b):
    _ew_shapes(a, b, "mul")
    out = _make(a.data * b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.data, b.shape))

    if out._parents:
        out._backward = backward
    return out


def scale(a, s):
    s = float(s)
    out = _make(a.data * s, (a,), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * s)

    if out._parents:
        out._backward = backward
    return out


def exp(a):
    y = np.exp(a.data)
    out = _make(y, (a,), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * y)

    if out._parents:
        out._backward = backward
    return out


def log(a):
    out = _make(np.log(a.data), (a,), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    if out._parents:
        out._backward = backward
    return out


def gelu(a):
    """GELU with the tanh approximation (derivative is exact for this form)."""
    y, t, inner_d = _gelu_np(a.data, with_partials=True)
    out = _make(y, (a,), None)

    def backward(g):
        if a.requires_grad:
            d = 0.5 * (1.0 + t) + 0.5 * a.data * (1.0 - t * t) * inner_d
            _accumulate(a, g * d)

    if out._parents:
        out._backward = backward
    return out


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu_np(x, with_partials=False):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    y = 0.5 * x * (1.0 + t)
    if not with_partials:
        return y
    return y, t, _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _make(a.data.transpose(axes), (a,), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse))

    if out._parents:
        out._backward = backward
    return out


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    out = _make(a.data.reshape(shape), (a,), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(old))

    if out._parents:
        out._backward = backward
    return out


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = _make(out_data, tuple(tensors), None)

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    if out._parents:
        out._backward = backward
    return out


def slice_along(a, axis, start, stop):
    axis = axis % a.ndim
    index = tuple(builtins_slice(None) if i != axis else builtins_slice(start, stop)
                  for i in range(a.ndim))
    out = _make(a.data[index], (a,), None)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accumulate(a, full)

    if out._parents:
        out._backward = backward
    return out


builtins_slice = slice  # keep the builtin reachable under a non-clashing name


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims disagree: {a.shape} x {b.shape}")
    out = _make(a.data @ b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                n = g.shape[-1]
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    if out._parents:
        out._backward = backward
    return out


def matinv(a):
    """Inverse of a square matrix; gradient via d(A^-1) = -A^-1 dA A^-1."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"matinv needs a square matrix, got {a.shape}")
    inv, _ = linalg.invert(a.data)
    out = _make(inv, (a,), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, -(inv.T @ g @ inv.T))

    if out._parents:
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# fused last-axis ops
# ---------------------------------------------------------------------------

def softmax_np(x):
    """Max-stabilized softmax along the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a):
    y = softmax_np(a.data)
    out = _make(y, (a,), None)

    def backward(g):
        if a.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            _accumulate(a, y * (g - inner))

    if out._parents:
        out._backward = backward
    return out


def reverse_cumsum_np(x):
    """out[..., i] = sum_{j >= i} x[..., j]."""
    return np.flip(np.cumsum(np.flip(x, axis=-1), axis=-1), axis=-1)


def reverse_cumsum(a):
    out = _make(reverse_cumsum_np(a.data), (a,), None)

    def backward(g):
        # d out_i / d x_j = [j >= i], so grad_x is the forward cumsum of g
        if a.requires_grad:
            _accumulate(a, np.cumsum(g, axis=-1))

    if out._parents:
        out._backward = backward
    return out


def layer_norm_np(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    return xhat * gain + bias, xhat, ivar


def layer_norm(x, gain, bias, eps=1e-5):
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError("layer_norm gain/bias must match the last axis")
    y, xhat, ivar = layer_norm_np(x.data, gain.data, bias.data, eps)
    out = _make(y, (x, gain, bias), None)

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, _reduce_to(g * xhat, gain.shape))
        if bias.requires_grad:
            _accumulate(bias, _reduce_to(g, bias.shape))
        if x.requires_grad:
            gx_hat = g * gain.data
            mean_g = gx_hat.mean(axis=-1, keepdims=True)
            mean_gx = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, ivar * (gx_hat - mean_g - xhat * mean_gx))

    if out._parents:
        out._backward = backward
    return out


def embedding_lookup(table, ids):
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding ids must be integers")
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    out = _make(table.data[ids], (table,), None)

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accumulate(table, full)

    if out._parents:
        out._backward = backward
    return out


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under row softmax."""
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects [N, vocab] logits")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy targets must be one id per row")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    rows = np.arange(x.shape[0])
    nll = lse - x[rows, targets]
    out = _make(np.asarray(nll.mean()), (logits,), None)

    def backward(g):
        if logits.requires_grad:
            probs = softmax_np(x)
            probs[rows, targets] -= 1.0
            _accumulate(logits, probs * (float(g) / x.shape[0]))

    if out._parents:
        out._backward = backward
    return out


def sum_all(a):
    out = _make(np.asarray(a.data.sum()), (a,), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, float(g)))

    if out._parents:
        out._backward = backward
    return out


def mean_all(a):
    n = a.size
    out = _make(np.asarray(a.data.mean()), (a,), None)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, float(g) / n))

    if out._parents:
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def global_grad_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grad_norm(params, max_norm):
    """Scale every gradient so the global L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


class SGD:
    """Plain gradient step over a named parameter set."""

    def __init__(self, params, lr=1e-2):
        self.params = dict(params)
        self.lr = float(lr)

    def step(self):
        for p in self.params.values():
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class Adam:
    """Adam with bias correction; lr_scales maps name substrings to factors."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, lr_scales=None):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.lr_scales = dict(lr_scales or {})
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def _lr_for(self, name):
        for key, factor in self.lr_scales.items():
            if key in name:
                return self.lr * factor
        return self.lr

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            step = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self._lr_for(name) * step

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
