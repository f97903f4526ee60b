"""A small reverse-mode automatic differentiation tape over numpy arrays.

Every operation on :class:`Tensor` records its parents and a closure that
maps the output cotangent to parent cotangents.  :func:`backward` walks the
graph in reverse topological order.  Values are float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "backward",
    "no_graph",
    "as_tensor",
    "concat",
    "stack",
    "where",
    "exp",
    "log",
    "tanh",
    "relu",
    "softplus",
    "sigmoid",
    "sin",
    "cos",
    "sqrt",
    "matmul",
    "rowwise_matmul",
    "solve",
    "qr",
    "diag_embed",
    "circular_conv2d",
    "circular_conv_transpose2d",
]


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self):
        self.grad = None

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def __neg__(self):
        return _make(-self.value, (self,), lambda g: (-g,))

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _mul(self, _reciprocal(as_tensor(other)))

    def __rtruediv__(self, other):
        return _mul(as_tensor(other), _reciprocal(self))

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")
        x = self.value
        return _make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # shape ops ----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.value.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(range(self.ndim))[::-1]
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _make(self.value.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a, b):
        return _make(np.swapaxes(self.value, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    @property
    def mT(self):
        return self.swapaxes(-1, -2)

    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        out = self.value.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _make(out, (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(x, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.array(x, dtype=float), requires_grad=requires_grad, name=name)


def parameter(x, name=None) -> Tensor:
    return Tensor(np.array(x, dtype=float), requires_grad=True, name=name)


_GRAPH_ENABLED = [True]


class no_graph:
    """Context manager that evaluates Tensor ops without recording parents."""

    def __enter__(self):
        self._prev = _GRAPH_ENABLED[0]
        _GRAPH_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAPH_ENABLED[0] = self._prev


def _make(value, parents, backward_fn):
    if not _GRAPH_ENABLED[0]:
        return Tensor(value)
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(value)
    return Tensor(value, True, parents, backward_fn)


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


def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def _reciprocal(a: Tensor) -> Tensor:
    r = 1.0 / a.value
    return _make(r, (a,), lambda g: (-g * r * r,))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def _getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.value.astype(int)
    shape = a.shape
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.value for t in tensors], axis=axis), tuple(tensors), bw)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)))


# elementwise functions ---------------------------------------------------
def _unary(x, value, dfdx):
    x = as_tensor(x)
    return _make(value, (x,), lambda g: (g * dfdx,))


def exp(x):
    x = as_tensor(x)
    e = np.exp(x.value)
    return _unary(x, e, e)


def log(x):
    x = as_tensor(x)
    return _unary(x, np.log(x.value), 1.0 / x.value)


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.value)
    return _unary(x, t, 1.0 - t * t)


def relu(x):
    x = as_tensor(x)
    return _unary(x, np.maximum(x.value, 0.0), (x.value > 0).astype(float))


def sigmoid(x):
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _unary(x, s, s * (1.0 - s))


def softplus(x):
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _unary(x, np.logaddexp(0.0, x.value), s)


def sin(x):
    x = as_tensor(x)
    return _unary(x, np.sin(x.value), np.cos(x.value))


def cos(x):
    x = as_tensor(x)
    return _unary(x, np.cos(x.value), -np.sin(x.value))


def sqrt(x):
    x = as_tensor(x)
    r = np.sqrt(x.value)
    return _unary(x, r, 0.5 / r)


# linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 1 or bv.ndim == 1:
        raise ValueError("matmul expects arrays with at least two axes")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), bw)


def rowwise_matmul(x, w) -> Tensor:
    """``x @ w`` for ``x`` (..., d) and a matrix ``w`` (d, m), one row at a time.

    Every row goes through an identically shaped product, so a row's result
    does not depend on how many other rows are stacked with it or on their
    order.  Plain ``x @ w`` lets BLAS pick blocking by the row count, which
    perturbs the last bits.
    """
    x, w = as_tensor(x), as_tensor(w)
    xv, wv = x.value, w.value
    y = (xv[..., None, :] @ wv)[..., 0, :]

    def bw(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if w.requires_grad else None
        return gx, gw

    return _make(y, (x, w), bw)


def solve(a, b) -> Tensor:
    """``X = A^{-1} B`` with batched LU factorization."""
    a, b = as_tensor(a), as_tensor(b)
    av = a.value
    x = np.linalg.solve(av, b.value)

    def bw(g):
        gb = np.linalg.solve(np.swapaxes(av, -1, -2), g)
        ga = -gb @ np.swapaxes(x, -1, -2)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, b.shape)

    return _make(x, (a, b), bw)


def diag_embed(v) -> Tensor:
    """Square matrix with ``v`` on the diagonal (last axis)."""
    v = as_tensor(v)
    n = v.shape[-1]
    eye = np.eye(n)
    return _make(v.value[..., :, None] * eye, (v,), lambda g: (np.diagonal(g, axis1=-2, axis2=-1).copy(),))


def qr(a, rank_tol: float = 1e-10):
    """Reduced QR of a tall matrix with a non-negative diagonal in ``R``.

    Returns ``(Q, R)`` as tensors.  Raises ``np.linalg.LinAlgError`` when
    a column is numerically dependent on the previous ones.
    """
    a = as_tensor(a)
    q, r = np.linalg.qr(a.value, mode="reduced")
    d = np.sign(np.diagonal(r, axis1=-2, axis2=-1)).copy()
    d[d == 0] = 1.0
    q = q * d[..., None, :]
    r = r * d[..., :, None]
    rd = np.abs(np.diagonal(r, axis1=-2, axis2=-1))
    scale = np.linalg.norm(a.value, axis=-2).max(axis=-1, keepdims=True)
    if np.any(rd <= rank_tol * np.maximum(scale, 1e-300)):
        raise np.linalg.LinAlgError("QR input is rank deficient (collinear columns)")

    # one tape node carries both outputs; Q and R are views that route
    # their cotangents into it
    node = _QRNode(a, q, r)
    return node.q_tensor, node.r_tensor


class _QRNode:
    def __init__(self, a, q, r):
        self.q, self.r = q, r
        self.gq = None
        self.gr = None
        out = _make(np.concatenate([q, r], axis=-2), (a,), self._bw)
        m = q.shape[-2]
        self.q_tensor = _getitem(out, (Ellipsis, slice(0, m), slice(None))) if out.requires_grad else Tensor(q)
        self.r_tensor = _getitem(out, (Ellipsis, slice(m, None), slice(None))) if out.requires_grad else Tensor(r)

    def _bw(self, g):
        q, r = self.q, self.r
        m = q.shape[-2]
        gq = g[..., :m, :]
        gr = g[..., m:, :]
        mt = r @ np.swapaxes(gr, -1, -2) - np.swapaxes(gq, -1, -2) @ q
        low = np.tril(mt)
        copyltu = low + np.swapaxes(np.tril(mt, -1), -1, -2)
        rhs = gq + q @ copyltu  # (m, n); dA = rhs @ R^{-T}
        ga = np.swapaxes(np.linalg.solve(r, np.swapaxes(rhs, -1, -2)), -1, -2)
        return (ga,)


# convolution -------------------------------------------------------------
def _conv_index(h, w, kh, kw, stride):
    ho, wo = h // stride, w // stride
    rows = (np.arange(ho)[:, None] * stride + np.arange(kh)[None, :] - kh // 2) % h
    cols = (np.arange(wo)[:, None] * stride + np.arange(kw)[None, :] - kw // 2) % w
    return rows, cols


def _check_conv(x_shape, k_shape, stride):
    if len(x_shape) != 4:
        raise ValueError("convolution input must be NHWC")
    kh, kw, cin, _ = k_shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel spatial size must be odd")
    if x_shape[-1] != cin:
        raise ValueError(f"channel mismatch: input {x_shape[-1]}, kernel {cin}")
    if x_shape[1] % stride or x_shape[2] % stride:
        raise ValueError("spatial size must be divisible by the stride")


def _conv_fwd(x, k, stride):
    _, h, w, _ = x.shape
    kh, kw, _, cout = k.shape
    rows, cols = _conv_index(h, w, kh, kw, stride)
    out = None
    for p in range(kh):
        xr = x[:, rows[:, p], :, :]
        for q in range(kw):
            term = xr[:, :, cols[:, q], :] @ k[p, q]
            out = term if out is None else out + term
    return out


def _conv_adj(y, k, out_hw, stride):
    """Adjoint of ``_conv_fwd`` in its input: scatter ``y`` back to the large grid."""
    h, w = out_hw
    kh, kw, cin, _ = k.shape
    rows, cols = _conv_index(h, w, kh, kw, stride)
    out = np.zeros((y.shape[0], h, w, cin))
    for p in range(kh):
        for q in range(kw):
            out[:, rows[:, p][:, None], cols[:, q][None, :], :] += y @ k[p, q].T
    return out


def _conv_kernel_grad(x, y_grad, k_shape, stride):
    _, h, w, _ = x.shape
    kh, kw, cin, cout = k_shape
    rows, cols = _conv_index(h, w, kh, kw, stride)
    gk = np.empty(k_shape)
    for p in range(kh):
        xr = x[:, rows[:, p], :, :]
        for q in range(kw):
            patch = xr[:, :, cols[:, q], :].reshape(-1, cin)
            gk[p, q] = patch.T @ y_grad.reshape(-1, cout)
    return gk


def circular_conv2d(x, kernel, stride: int = 1) -> Tensor:
    """Convolution on the torus (wrap-around padding), NHWC layout.

    ``kernel`` has shape ``(kh, kw, c_in, c_out)`` with odd ``kh, kw``;
    the output has spatial size ``(H // stride, W // stride)``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv(x.shape, kernel.shape, stride)
    xv, kv = x.value, kernel.value
    y = _conv_fwd(xv, kv, stride)

    def bw(g):
        gx = _conv_adj(g, kv, xv.shape[1:3], stride) if x.requires_grad else None
        gk = _conv_kernel_grad(xv, g, kv.shape, stride) if kernel.requires_grad else None
        return gx, gk

    return _make(y, (x, kernel), bw)


def circular_conv_transpose2d(x, kernel, stride: int = 1) -> Tensor:
    """Adjoint of :func:`circular_conv2d`: maps ``(N, h, w, c_out)`` to ``(N, h*s, w*s, c_in)``.

    ``kernel`` uses the same ``(kh, kw, c_in, c_out)`` layout as the forward
    convolution it transposes.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise ValueError("convolution input must be NHWC")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel spatial size must be odd")
    if x.shape[-1] != cout:
        raise ValueError(f"channel mismatch: input {x.shape[-1]}, kernel {cout}")
    xv, kv = x.value, kernel.value
    out_hw = (xv.shape[1] * stride, xv.shape[2] * stride)
    y = _conv_adj(xv, kv, out_hw, stride)

    def bw(g):
        gx = _conv_fwd(g, kv, stride) if x.requires_grad else None
        gk = _conv_kernel_grad(g, xv, kv.shape, stride) if kernel.requires_grad else None
        return gx, gk

    return _make(y, (x, kernel), bw)


# backward pass -----------------------------------------------------------
def _toposort(root: Tensor):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every parameter reached.

    Raises ``RuntimeError`` if ``loss`` was not produced by a recorded
    computation involving parameters.
    """
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise RuntimeError("backward called on a tensor with no recorded forward computation")
    if grad is None:
        if loss.size != 1:
            raise ValueError("backward on a non-scalar needs an explicit cotangent")
        grad = np.ones(loss.shape)
    cot = {id(loss): np.asarray(grad, float)}
    for node in reversed(_toposort(loss)):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            cot[key] = pg if key not in cot else cot[key] + pg
