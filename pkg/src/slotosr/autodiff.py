"""Dense-array reverse-mode autodiff on numpy.

Deliberately small: float64 arrays, a dozen ops, and a tape built from
closures.  Forward values are plain numpy; calling ``backward`` on a scalar
loss walks the recorded graph in reverse topological order and accumulates
gradients into ``Tensor.grad``.

Reductions that feed a softmax or logsumexp denominator sum their terms in
sorted order, so the result depends only on the multiset of inputs.  This is
what makes slot-permutation equivariance hold bitwise instead of merely to
rounding error.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy float64 array plus an optional gradient and backward closure."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values, parents, backward):
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t, g, fresh=False):
    # fresh=True promises g was freshly allocated by the caller and is not
    # referenced anywhere else, so the buffer can be adopted without a copy.
    if t.requires_grad:
        if t.grad is None:
            t.grad = g if fresh else np.array(g, dtype=np.float64)
        else:
            t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (the reverse of numpy broadcasting)."""
    g = np.asarray(g, dtype=np.float64)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _sorted_sum(x, axis):
    # Order-invariant reduction: identical result for any permutation along axis.
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise / binary ops

def add(a, b):
    a, b = _lift(a), _lift(b)
    try:
        values = a.values + b.values
    except ValueError:
        raise ValueError(f"add: incompatible shapes {a.shape} vs {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(values, (a, b), bw)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    try:
        values = a.values - b.values
    except ValueError:
        raise ValueError(f"sub: incompatible shapes {a.shape} vs {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape), fresh=True)

    return _node(values, (a, b), bw)


def neg(a):
    a = _lift(a)

    def bw(g):
        _accumulate(a, -g, fresh=True)

    return _node(-a.values, (a,), bw)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    try:
        values = a.values * b.values
    except ValueError:
        raise ValueError(f"mul: incompatible shapes {a.shape} vs {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.values, a.shape), fresh=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.values, b.shape), fresh=True)

    return _node(values, (a, b), bw)


def div(a, b):
    a, b = _lift(a), _lift(b)
    try:
        values = a.values / b.values
    except ValueError:
        raise ValueError(f"div: incompatible shapes {a.shape} vs {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.values, a.shape), fresh=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * values / b.values, b.shape), fresh=True)

    return _node(values, (a, b), bw)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    values = np.matmul(a.values, b.values)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, b.values.swapaxes(-1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape), fresh=True)
        if b.requires_grad:
            if b.values.ndim == 2 and g.ndim > 2:
                # weight matrix against stacked data: contract leading axes in one GEMM
                axes = tuple(range(g.ndim - 1))
                _accumulate(b, np.tensordot(a.values, g, axes=(axes, axes)), fresh=True)
            else:
                gb = np.matmul(a.values.swapaxes(-1, -2), g)
                _accumulate(b, _unbroadcast(gb, b.shape), fresh=True)

    return _node(values, (a, b), bw)


def relu(a):
    a = _lift(a)
    mask = a.values > 0.0

    def bw(g):
        _accumulate(a, g * mask, fresh=True)

    return _node(np.where(mask, a.values, 0.0), (a,), bw)


def sigmoid(a):
    a = _lift(a)
    x = a.values
    # stable in both tails
    s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accumulate(a, g * s * (1.0 - s), fresh=True)

    return _node(s, (a,), bw)


def tanh(a):
    a = _lift(a)
    t = np.tanh(a.values)

    def bw(g):
        _accumulate(a, g * (1.0 - t * t), fresh=True)

    return _node(t, (a,), bw)


def sqrt(a):
    a = _lift(a)
    r = np.sqrt(a.values)

    def bw(g):
        _accumulate(a, g * 0.5 / r, fresh=True)

    return _node(r, (a,), bw)


def log(a):
    a = _lift(a)

    def bw(g):
        _accumulate(a, g / a.values, fresh=True)

    return _node(np.log(a.values), (a,), bw)


def exp(a):
    a = _lift(a)
    e = np.exp(a.values)

    def bw(g):
        _accumulate(a, g * e, fresh=True)

    return _node(e, (a,), bw)


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes through inside the bounds."""
    a = _lift(a)
    inside = (a.values >= lo) & (a.values <= hi)

    def bw(g):
        _accumulate(a, g * inside, fresh=True)

    return _node(np.clip(a.values, lo, hi), (a,), bw)


# ---------------------------------------------------------------------------
# reductions / shape ops

def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    values = a.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.shape))

    return _node(values, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    values = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.values.size if axis is None else a.values.shape[axis]

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg / count, a.shape))

    return _node(values, (a,), bw)


def reshape(a, shape):
    a = _lift(a)

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.values.reshape(shape), (a,), bw)


def transpose(a, axes):
    a = _lift(a)
    inverse = np.argsort(axes)

    def bw(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.values.transpose(axes), (a,), bw)


# ---------------------------------------------------------------------------
# softmax family

def softmax(a, axis=-1):
    a = _lift(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / _sorted_sum(e, axis)

    def bw(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(a, p * (g - inner), fresh=True)

    return _node(p, (a,), bw)


def logsumexp(a, axis=-1, keepdims=False):
    a = _lift(a)
    m = a.values.max(axis=axis, keepdims=True)
    e = np.exp(a.values - m)
    s = _sorted_sum(e, axis)
    values = m + np.log(s)
    p = e / s
    if not keepdims:
        values = values.squeeze(axis)

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, gg * p, fresh=True)

    return _node(values, (a,), bw)


# ---------------------------------------------------------------------------
# composite layers

def layer_norm(a, gain=None, bias=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a = _lift(a)
    mu = tmean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    out = div(centered, sqrt(add(var, eps)))
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def linear(x, w, b):
    return add(matmul(x, w), b)


def mlp(x, layers):
    """Apply a ReLU MLP given ``layers`` as a list of (weight, bias) pairs."""
    h = x
    for w, b in layers[:-1]:
        h = relu(linear(h, w, b))
    w, b = layers[-1]
    return linear(h, w, b)


def gru_cell(state, inp, p):
    """One GRU step; ``p`` holds wir/whr/bir/bhr (reset), wiz/.. (update), win/.. (candidate)."""
    r = sigmoid(add(linear(inp, p["wir"], p["bir"]), linear(state, p["whr"], p["bhr"])))
    z = sigmoid(add(linear(inp, p["wiz"], p["biz"]), linear(state, p["whz"], p["bhz"])))
    n = tanh(add(linear(inp, p["win"], p["bin"]), mul(r, linear(state, p["whn"], p["bhn"]))))
    return add(mul(sub(1.0, z), n), mul(z, state))


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits, one_hot):
    """Mean softmax cross-entropy of logit rows against one-hot target rows."""
    logits = _lift(logits)
    target = np.asarray(one_hot, dtype=np.float64)
    if target.shape != logits.shape:
        raise ValueError(f"cross_entropy: incompatible shapes {logits.shape} vs {target.shape}")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValueError("cross_entropy: targets must be one-hot (entries in {0,1})")
    if not np.allclose(target.sum(axis=-1), 1.0):
        raise ValueError("cross_entropy: each target row must have exactly one 1")
    lse = logsumexp(logits, axis=-1, keepdims=True)
    picked = tsum(mul(logits, Tensor(target)), axis=-1, keepdims=True)
    return tmean(sub(lse, picked))


def bce(probabilities, targets, eps=1e-7):
    """Mean binary cross-entropy; probabilities are clamped to [eps, 1-eps]."""
    probabilities = _lift(probabilities)
    target = np.asarray(targets, dtype=np.float64)
    if target.shape != probabilities.shape:
        raise ValueError(f"bce: incompatible shapes {probabilities.shape} vs {target.shape}")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValueError("bce: targets must be binary (entries in {0,1})")
    p = clip(probabilities, eps, 1.0 - eps)
    t = Tensor(target)
    loss = add(mul(t, log(p)), mul(sub(1.0, t), log(sub(1.0, p))))
    return neg(tmean(loss))


# ---------------------------------------------------------------------------
# backward pass

def backward(loss):
    """Run reverse-mode accumulation from a scalar loss."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params):
    """Clear gradients on an iterable (or dict) of tensors."""
    if isinstance(params, dict):
        params = params.values()
    for p in params:
        p.zero_grad()
