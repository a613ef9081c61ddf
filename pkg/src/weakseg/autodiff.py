"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations execute eagerly on numpy arrays while recording a dynamic DAG;
calling :meth:`Tensor.backward` on a scalar walks the DAG in reverse
topological order and accumulates gradients into every reachable tensor
that has ``requires_grad`` set.  A finite-difference harness
(:func:`gradcheck`) verifies analytic gradients of arbitrary scalar-valued
pipelines.

All math is float64; every forward op raises if its output contains a
non-finite value, so overflow surfaces as an error instead of silent NaN.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff.

    ``data`` is always a contiguous float64 array.  ``grad`` is ``None``
    until a backward pass reaches this tensor; it then has the same shape
    as ``data``.  Tensors created by operations hold references to the
    parent tensors that require gradients and a closure propagating the
    output gradient to them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- graph traversal -----------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable gradient leaf.

        The seed must be a scalar (a single-element tensor).  Gradients
        accumulate: call :meth:`zero_grad` on leaves between passes.
        """
        if self.data.size != 1:
            raise ValueError(f"backward seed must be scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _wrap(other))

    def __rsub__(self, other):
        return subtract(_wrap(other), self)

    def __mul__(self, other):
        return multiply(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, _wrap(other))

    def __rtruediv__(self, other):
        return divide(_wrap(other), self)

    def __neg__(self):
        return multiply(self, Tensor(-1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return take_slice(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_reduce(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return max_reduce(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return sum_reduce(self, axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    t.grad = g.copy() if t.grad is None else t.grad + g


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    # cheap scalar probe first; the full scan only runs on suspicion
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by '{op}'")
    return data


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        return Tensor(data, requires_grad=True, _parents=tracked, _backward=backward)
    return Tensor(data)


# -- elementwise arithmetic ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _check_finite(a.data + b.data, "add")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    out = _check_finite(a.data - b.data, "subtract")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bw)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = _check_finite(a.data * b.data, "multiply")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def divide(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    _check_finite(out, "divide")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = _check_finite(np.matmul(a.data, b.data), "matmul")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape))

    return _make(out, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** c`` for a constant exponent ``c``."""
    c = float(exponent)
    if not c.is_integer():
        if np.any(a.data < 0):
            raise ValueError("power: negative base with non-integer exponent")
    if c < 0 and np.any(a.data == 0):
        raise ValueError("power: zero base with negative exponent")
    out = _check_finite(a.data ** c, "power")

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            local = c * a.data ** (c - 1.0)
        local = np.where(np.isfinite(local), local, 0.0)
        _accumulate(a, g * local)

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = _check_finite(np.exp(a.data), "exp")

    def bw(g):
        _accumulate(a, g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: argument must be strictly positive")
    out = _check_finite(np.log(a.data), "log")

    def bw(g):
        _accumulate(a, g / a.data)

    return _make(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    _check_finite(out, "sigmoid")

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def log_sigmoid(a: Tensor) -> Tensor:
    """Numerically stable ``log(sigmoid(x)) = -softplus(-x)``."""
    x = a.data
    out = -(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x))))
    _check_finite(out, "log_sigmoid")

    def bw(g):
        # d/dx log(sigmoid(x)) = sigmoid(-x)
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = np.exp(-x[pos]) / (1.0 + np.exp(-x[pos]))
        s[~pos] = 1.0 / (1.0 + np.exp(x[~pos]))
        _accumulate(a, g * s)

    return _make(out, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit ``0.5 x (1 + erf(x / sqrt(2)))``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _check_finite(x * cdf, "gelu")

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _accumulate(a, g * (cdf + x * pdf))

    return _make(out, (a,), bw)


# -- reductions --------------------------------------------------------------


def sum_reduce(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _check_finite(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum")

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(ge, a.data.shape).copy())

    return _make(out, (a,), bw)


def max_reduce(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max over an axis; ties route the gradient to the first maximal index."""
    if a.data.size == 0:
        raise ValueError("max of an empty tensor")
    out = np.asarray(a.data.max(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            mask = np.zeros(a.data.size)
            mask[int(np.argmax(a.data.reshape(-1)))] = 1.0
            _accumulate(a, (mask * float(g.reshape(-1)[0])).reshape(a.data.shape))
        else:
            idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            ge = g if keepdims else np.expand_dims(g, axis)
            local = np.zeros_like(a.data)
            np.put_along_axis(local, idx, ge, axis)
            _accumulate(a, local)

    return _make(out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max subtraction for stability."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _check_finite(out, "softmax")

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - inner))

    return _make(out, (a,), bw)


# -- shape manipulation ------------------------------------------------------


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)

    def bw(g):
        if axes is None:
            _accumulate(a, np.transpose(g))
        else:
            _accumulate(a, np.transpose(g, np.argsort(axes)))

    return _make(np.ascontiguousarray(out), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(out, (a,), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))

    return _make(out, (a,), bw)


def take_slice(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; fancy indexing is not supported."""
    out = a.data[key]

    def bw(g):
        local = np.zeros_like(a.data)
        local[key] = g
        _accumulate(a, local)

    return _make(np.ascontiguousarray(out), (a,), bw)


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concatenate of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            if t.requires_grad:
                _accumulate(t, piece)

    return _make(out, tuple(tensors), bw)


def stack_rows(tensors) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    return concatenate([reshape(t, (1, t.data.shape[0])) for t in tensors], axis=0)


# -- neural-net primitives ---------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = _check_finite(xhat * gamma.data + beta.data, "layer_norm")
    n = x.data.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.data.shape))
        if x.requires_grad:
            gg = g * gamma.data
            term = gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, term * inv_std)

    return _make(out, (x, gamma, beta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim not in (1, 2):
        raise ValueError("embedding ids must be a 1-D or 2-D integer array")
    if idx.size == 0:
        raise ValueError("embedding of an empty id sequence")
    if np.any(idx < 0) or np.any(idx >= table.data.shape[0]):
        raise ValueError("embedding id out of vocabulary range")
    out = table.data[idx]

    def bw(g):
        local = np.zeros_like(table.data)
        np.add.at(local, idx, g)
        _accumulate(table, local)

    return _make(out, (table,), bw)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Fused scaled-dot-product attention over ``heads`` column groups.

    Inputs are ``(..., N, D)`` with ``D`` divisible by ``heads``; head h
    attends with columns ``[h*D/heads, (h+1)*D/heads)``.  Fusing the whole
    computation into one graph node keeps the op count (and Python
    overhead) low on the training path.
    """
    shape = q.data.shape
    if k.data.shape != shape or v.data.shape != shape:
        raise ValueError("attention operands must share one shape")
    n, dim = shape[-2], shape[-1]
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by {heads} heads")
    head_dim = dim // heads
    scale = head_dim ** -0.5

    def split(arr):
        # (..., N, D) -> (..., heads, N, head_dim)
        return arr.reshape(*shape[:-1], heads, head_dim).swapaxes(-2, -3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    logits = np.matmul(qh, kh.swapaxes(-1, -2)) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = _check_finite(
        np.matmul(weights, vh).swapaxes(-2, -3).reshape(shape), "attention"
    )

    def bw(g):
        gh = split(g)
        if v.requires_grad:
            gv = np.matmul(weights.swapaxes(-1, -2), gh)
            _accumulate(v, gv.swapaxes(-2, -3).reshape(shape))
        gw = np.matmul(gh, vh.swapaxes(-1, -2))
        glogits = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
        if q.requires_grad:
            gq = np.matmul(glogits, kh) * scale
            _accumulate(q, gq.swapaxes(-2, -3).reshape(shape))
        if k.requires_grad:
            gk = np.matmul(glogits.swapaxes(-1, -2), qh) * scale
            _accumulate(k, gk.swapaxes(-2, -3).reshape(shape))

    return _make(out, (q, k, v), bw)


# -- gradient checking -------------------------------------------------------


def gradcheck(fn, point, step: float = 1e-5) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps the tensors in ``point`` to a scalar tensor.  Returns the
    maximum over all coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.  The caller must keep
    ``fn`` smooth at ``point`` (e.g. avoid max-reduce ties).
    """
    if not (0.0 < step <= 1e-3):
        raise ValueError("gradcheck step must lie in (0, 1e-3]")
    if isinstance(point, Tensor):
        point = [point]
    inputs = [Tensor(p.data.copy(), requires_grad=True) for p in point]
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("gradcheck target must be scalar-valued")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + step
            f_plus = fn(*inputs).item()
            flat[k] = saved - step
            f_minus = fn(*inputs).item()
            flat[k] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(numeric) or not np.isfinite(ana_flat[k]):
                raise FloatingPointError("non-finite value encountered during gradcheck")
            err = abs(ana_flat[k] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
