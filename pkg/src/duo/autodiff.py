"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient
the output records its parents and a closure mapping the output gradient to
one gradient per parent. Node ids come from a global counter, so creation
order is already a topological order of the trace; :func:`backward` sweeps it
in reverse and sums gradients for nodes with several consumers.

Only scalar-constant broadcasting is supported. Shape mismatches raise
:class:`~duo.errors.DimensionError`.
"""
import contextlib
import itertools

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError
from .rng import SplitMix64

_node_ids = itertools.count()
_grad_enabled = True
CHECK_FINITE = True
DEFAULT_DTYPE = np.float64


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a trace."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "id", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_node_ids)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr, op):
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(data, op, parents, backward):
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def constant(data, dtype=None):
    return Tensor(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))


def parameter(data, name=None, dtype=None):
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


# --------------------------------------------------------------------------
# trace and backward


def trace(loss):
    """Nodes reachable from ``loss`` in topological (creation) order."""
    seen = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(node._parents)
    return [seen[i] for i in sorted(seen)]


def backward(loss):
    """Populate ``.grad`` on every leaf that requires a gradient.

    Leaf gradients accumulate across calls; clear them between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = trace(loss)
    grads = {loss.id: np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg


# --------------------------------------------------------------------------
# elementwise


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape("add", a, b)
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * c,))


def relu(x):
    keep = x.data > 0
    return _result(np.where(keep, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * keep,))


def elementwise(kind, a, b):
    """Dispatch helper: ``kind`` is one of add, sub, mul, scale."""
    if kind == "scale":
        return scale(a, b)
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


# --------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from exc
    return _result(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat_lastdim(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading shapes differ {a.shape} vs {b.shape}")
    d1 = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return _result(out, "concat", (a, b), lambda g: (g[..., :d1], g[..., d1:]))


def sum_all(x):
    shape = x.shape
    return _result(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(x):
    shape, n = x.shape, x.data.size
    return _result(np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.broadcast_to(g / n, shape),))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), _bw)


def linear(x, W):
    """``x[..., d] @ W[d, n]``; ``x`` may be a bare vector."""
    if x.ndim == 1:
        return reshape(matmul(reshape(x, (1, x.shape[0])), W), (W.shape[-1],))
    return matmul(x, W)


# --------------------------------------------------------------------------
# normalization


def softmax_lastdim(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax", (x,), _bw)


def masked_softmax(x, mask):
    """Softmax over allowed cells; ``mask`` is a boolean array broadcastable to ``x``.

    Disallowed cells get exactly zero weight. Rows with no allowed cell come
    out as all zeros instead of NaN.
    """
    if mask is None:
        return softmax_lastdim(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(mask, x.data, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, z - m, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    y = (e / np.where(s > 0, s, 1.0)).astype(x.dtype)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "masked_softmax", (x,), _bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if d < 2:
        raise ContractError("layer_norm over a length-1 axis is degenerate")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, "layer_norm", (x, gamma, beta), _bw)


# --------------------------------------------------------------------------
# stochastic and lookup ops


def dropout(x, p, rng: SplitMix64, training=True):
    """Inverted dropout: survivors scaled by ``1/(1-p)``, identity at inference."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.uniform(x.shape) >= p
    factor = (keep / (1.0 - p)).astype(x.dtype)
    return _result(x.data * factor, "dropout", (x,), lambda g: (g * factor,))


def embedding(table, ids):
    """Row lookup ``table[ids]``; output shape ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    n, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"token id out of range [0, {n})")
    tdtype = table.dtype

    def _bw(g):
        gt = np.zeros((n, d), dtype=tdtype)
        np.add.at(gt, ids.ravel(), g.reshape(-1, d))
        return (gt,)

    return _result(table.data[ids], "embedding", (table,), _bw)


# --------------------------------------------------------------------------
# loss


def cross_entropy(logits, targets, smoothing=0.0, ignore_pad=False, pad_id=0):
    """Mean label-smoothed cross-entropy over the leading positions.

    The target class gets mass ``1 - smoothing``; the rest is spread evenly
    over the other classes, excluding ``pad_id`` when ``ignore_pad`` is set.
    With ``ignore_pad`` positions whose target is ``pad_id`` are skipped.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"label smoothing must lie in [0, 1), got {smoothing}")
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    z = logits.data.reshape(-1, V)
    t = targets.ravel()
    valid = (t != pad_id) if ignore_pad else np.ones(t.shape, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ContractError("cross_entropy: every position is padding")

    others = V - 2 if ignore_pad else V - 1
    off = smoothing / others if smoothing > 0 else 0.0
    q = np.full(z.shape, off, dtype=z.dtype)
    if ignore_pad:
        q[:, pad_id] = 0.0
    q[np.arange(len(t)), t] = 1.0 - smoothing

    zs = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    logp = zs - lse
    per_pos = -(q * logp).sum(axis=-1)
    loss = np.asarray((per_pos * valid).sum() / count, dtype=z.dtype)
    shape = logits.shape

    def _bw(g):
        p = np.exp(logp)
        grad = (p - q) * (valid / count).astype(p.dtype)[:, None]
        return ((g * grad).reshape(shape),)

    return _result(loss, "cross_entropy", (logits,), _bw)
