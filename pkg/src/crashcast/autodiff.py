"""Small dense-tensor engine with reverse-mode differentiation.

Only the operations needed by the ConvLSTM cell are provided: elementwise
arithmetic, sigmoid/tanh/softplus, channel concatenation, slicing, sums and a
zero-padded "same" 2-D convolution. Everything runs in float64.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "tensor",
    "add",
    "sub",
    "hadamard",
    "scale",
    "sigmoid",
    "tanh",
    "softplus",
    "square",
    "concat",
    "total",
    "conv2d_same",
    "backward",
    "grad_check",
]


class Tensor:
    """A float64 array that optionally records how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_released", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise ValueError(f"tensors have at most 4 axes, got shape {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self._released = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents and not self._released

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self):
        return self.data.copy()

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index):
        return _getitem(self, index)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._released = False
    tracked = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(tracked)
    out.grad = None
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, factor):
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def square(a):
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sigmoid(a):
    a = _as_tensor(a)
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    a = _as_tensor(a)
    x = a.data
    return _result(np.logaddexp(0.0, x), (a,), lambda g: (g * expit(x),))


# structural ----------------------------------------------------------------

def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _result(data, tuple(tensors), back)


class _Partial:
    """Gradient that touches only ``index`` of its parent; avoids a dense buffer per slice."""

    __slots__ = ("index", "g")

    def __init__(self, index, g):
        self.index, self.g = index, g


def _accumulate(grads, parent, pg):
    # entries are [array, owned]; arrays not owned may alias another node's gradient
    key = id(parent)
    entry = grads.get(key)
    if isinstance(pg, _Partial):
        if entry is None:
            buf = np.zeros(parent.shape)
            buf[pg.index] = pg.g
            grads[key] = [buf, True]
        else:
            if not entry[1]:
                entry[0] = entry[0].copy()
                entry[1] = True
            entry[0][pg.index] += pg.g
    elif entry is None:
        grads[key] = [pg, False]
    elif entry[1]:
        entry[0] += pg
    else:
        entry[0] = entry[0] + pg
        entry[1] = True


def _getitem(a, index):
    data = a.data[index]
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None))) for i in parts)

    def back(g):
        if basic:
            return (_Partial(index, g),)
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(data, dtype=np.float64), (a,), back)


def total(a):
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# convolution ---------------------------------------------------------------

def conv2d_same(x, kernel, bias=None):
    """Zero-padded cross-correlation that keeps the spatial extent.

    ``x`` is ``[C_in, H, W]`` or ``[B, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, k, k]`` with odd ``k``; ``bias`` is ``[C_out]`` or None.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if kernel.data.ndim != 4:
        raise ValueError(f"kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ValueError(f"input must be [C, H, W] or [B, C, H, W], got {x.shape}")
    b, c, h, w = xd.shape
    if c != c_in:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {c_in}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"bias must have shape ({c_out},), got {bias.shape}")

    k = kh
    p = (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # [B, C, H, W, k, k]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * k * k)
    kmat = kernel.data.reshape(c_out, c * k * k)
    out = (cols @ kmat.T).reshape(b, h, w, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def back(g):
        g4 = g[None] if unbatched else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(b * h * w, c_out)
        grads = []
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(b, h, w, c, k, k)
            dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
            for dy in range(k):
                for dx in range(k):
                    dxp[:, :, dy:dy + h, dx:dx + w] += dcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            dx_ = dxp[:, :, p:p + h, p:p + w]
            grads.append(dx_[0] if unbatched else dx_)
        else:
            grads.append(None)
        grads.append((g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None)
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, back)


# reverse pass --------------------------------------------------------------

def _topological(root):
    order, seen = [], set()
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, retain_graph=False):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked leaf tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor with requires_grad=True")
    if loss._released:
        raise RuntimeError("graph already released; pass retain_graph=True to reuse it")

    order = _topological(loss)
    grads = {id(loss): [np.ones_like(loss.data), True]}
    for node in reversed(order):
        entry = grads.pop(id(node), None)
        if entry is None:
            continue
        g = entry[0]
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _accumulate(grads, parent, pg)
    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._released = True


def grad_check(f, params, eps=1e-5):
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` takes no arguments, rebuilds its graph from ``params`` on every
    call and returns a scalar Tensor. The gap for one entry is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise ValueError("objective is not finite")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("objective is not finite near the evaluation point")
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    for p in params:
        p.zero_grad()
    return worst
