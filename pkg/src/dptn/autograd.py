"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds its output from numpy arrays and, when any input requires a
gradient, records a backward closure plus parent references on the output.
``Tensor.backward`` collects the recorded graph into a :class:`GradTape`
(parents before children), walks it in reverse, accumulates gradients into
leaf tensors, and then releases the graph.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from dptn import kernels

DEFAULT_DTYPE = np.float64

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern (which side of each kink) of every kinked op run inside.

    Finite-difference checks use this to tell a smooth neighbourhood from one
    that straddles a ReLU/abs/clamp kink.
    """
    prev = getattr(_state, "kink_log", None)
    log = []
    _state.kink_log = log
    try:
        yield log
    finally:
        _state.kink_log = prev


def _note_kinks(pattern):
    log = getattr(_state, "kink_log", None)
    if log is not None:
        log.append(pattern)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- differentiation ---------------------------------------------------
    def backward(self, grad=None):
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; re-run the forward pass first")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        tape = GradTape.from_output(self)
        tape.run(self, np.asarray(grad, dtype=self.dtype))
        tape.release()

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class GradTape:
    """Recorded operations in topological order (every parent precedes its children)."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, out, grad):
        grads = {id(out): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    def release(self):
        for node in self.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data, parents, backward, op):
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _pair(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    a = as_tensor(a)
    return a, as_tensor(b, dtype=a.dtype)


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), backward, "div")


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tabs(x):
    """|x| with subgradient sign(0) = 0."""
    x = as_tensor(x)
    sgn = np.sign(x.data)
    _note_kinks(sgn)
    return _result(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x):
    x = as_tensor(x)
    xd = x.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    mask = x.data > 0
    _note_kinks(mask)
    factor = np.where(mask, 1.0, slope).astype(x.dtype)
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def clamp(x, lo, hi):
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    _note_kinks(inside)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# -- reductions and shape -----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(tsum(x, axes, keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, idx):
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] += g
        return (full,)

    return _result(np.ascontiguousarray(x.data[idx]), (x,), backward, "getitem")


def concat(xs, axis=0):
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat: empty input list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=ax))

    return _result(np.concatenate([t.data for t in xs], axis=ax), xs, backward, "concat")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward, "matmul")


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


# -- convolutional building blocks -------------------------------------------

def conv2d(x, w, b=None, stride=1, pad=0):
    """2D cross-correlation. x: [N,C,H,W], w: [O,C,kh,kw], b: [O]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {w.shape} are incompatible")
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape} with pad {pad}")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(O, -1)
    out = (wmat @ cols).reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, w) if b is None else (x, w, b)
    xshape = x.shape

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(wmat.T @ gmat, xshape, kh, kw, stride, pad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, backward, "conv2d")


def instance_norm(x, gamma=None, beta=None, eps=1e-5):
    """Per-(sample, channel) standardization over H, W, then per-channel affine."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: expected [N,C,H,W], got {x.shape}")
    C = x.shape[1]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = np.ones(C, dtype=x.dtype) if gamma is None else as_tensor(gamma).data
    b_ = np.zeros(C, dtype=x.dtype) if beta is None else as_tensor(beta).data
    out = xhat * g_.reshape(1, C, 1, 1) + b_.reshape(1, C, 1, 1)
    parents = [x] + [t for t in (gamma, beta) if t is not None]

    def backward(g):
        gx_hat = g * g_.reshape(1, C, 1, 1)
        gx = inv * (gx_hat - gx_hat.mean(axis=(2, 3), keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=(2, 3), keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, parents, backward, "instance_norm")


def avg_pool2(x):
    """2x2 average pooling with stride 2."""
    x = as_tensor(x)
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial dims of {x.shape} must be even")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _result(out, (x,), backward, "avg_pool2")


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample2")


# -- verification ------------------------------------------------------------

def numeric_grad(f, x, h=1e-4, coords=None):
    """Central differences of scalar ``f`` w.r.t. ``x.data`` (perturbed in place)."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = {}
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out


def gradcheck(f, x, h=1e-4, coords=None):
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor that depends on
    ``x`` (a leaf with ``requires_grad``). The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"gradcheck step h={h} outside [1e-6, 1e-3]")
    x.requires_grad = True
    x.grad = None
    loss = f()
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    analytic = analytic.reshape(-1)
    x.grad = None
    numeric = numeric_grad(f, x, h, coords)
    worst = 0.0
    for i, n in numeric.items():
        a = float(analytic[i])
        err = abs(a - n) / max(1.0, abs(a), abs(n))
        worst = max(worst, err)
    return worst
