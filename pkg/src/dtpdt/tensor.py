"""Minimal reverse-mode autodiff over dense float64 arrays.

Graphs are built eagerly by the op functions below and released after
``backward``. Binary ops need equal shapes, except that a 0-d operand is
broadcast (needed for scalar thresholds and loss arithmetic).

Volume-level ops (``conv3d``, ``maxpool3d``) act on 3D values; the network
ops near the bottom act on channel-first ``(C, X, Y, Z)`` values.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .volume import Kernel3, Volume


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


def _as_array(v):
    if isinstance(v, Volume):
        return v.data
    return np.asarray(v, dtype=np.float64)


class DiffNode:
    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward", "_consumed", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward=None, name=None):
        self.value = np.array(_as_array(value), dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.parents = parents
        self._backward = backward
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def item(self):
        return float(self.value)

    def volume(self, spacing=(1.0, 1.0, 1.0)):
        return Volume(self.value, spacing)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)
        self._consumed = False

    def detach(self):
        return DiffNode(self.value.copy())

    def backward(self):
        backward(self)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.value.ndim == 0 and np.ndim(g) != 0:
            g = np.sum(g)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g
        self._consumed = True

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        rg = ", requires_grad" if self.requires_grad else ""
        return f"DiffNode(shape={self.shape}{rg})"


def as_node(x):
    return x if isinstance(x, DiffNode) else DiffNode(x)


def param(value, name=None):
    return DiffNode(value, requires_grad=True, name=name)


def _make(value, parents, backward):
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return DiffNode(value)
    return DiffNode(value, requires_grad=True, parents=tuple(parents), backward=backward)


def _binary_shape(a, b):
    if a.shape == b.shape or a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def backward(root):
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node."""
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise GraphError("backward already ran on this graph")
    if not root.requires_grad:
        raise GraphError("root does not depend on any parameter")

    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in order:
        if node.is_leaf and node._consumed:
            raise GraphError(f"leaf {node.name or node!r} holds a gradient from an earlier pass; zero it first")

    for node in order:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    for node in order:
        if not node.is_leaf:
            node.parents = ()
            node._backward = None
    root._consumed = True


def zero_grad(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    _binary_shape(a, b)

    def bw(g):
        a._accum(g)
        b._accum(g)
    return _make(a.value + b.value, (a, b), bw)


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _binary_shape(a, b)

    def bw(g):
        a._accum(g)
        b._accum(-g)
    return _make(a.value - b.value, (a, b), bw)


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _binary_shape(a, b)

    def bw(g):
        a._accum(g * b.value)
        b._accum(g * a.value)
    return _make(a.value * b.value, (a, b), bw)


def div(a, b):
    a, b = as_node(a), as_node(b)
    _binary_shape(a, b)
    out = a.value / b.value

    def bw(g):
        a._accum(g / b.value)
        b._accum(-g * out / b.value)
    return _make(out, (a, b), bw)


def neg(a):
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: a._accum(-g))


def scale(a, c):
    a = as_node(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: a._accum(g * c))


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: a._accum(g * out))


def log(a):
    a = as_node(a)
    if np.any(a.value <= 0):
        raise ValueError("log of a non-positive value; apply clampmin first")
    return _make(np.log(a.value), (a,), lambda g: a._accum(g / a.value))


def clampmin(a, c):
    """max(a, c); the gradient passes only where a > c."""
    a = as_node(a)
    keep = a.value > c
    return _make(np.where(keep, a.value, c), (a,), lambda g: a._accum(g * keep))


def clampmax(a, c):
    a = as_node(a)
    keep = a.value < c
    return _make(np.where(keep, a.value, c), (a,), lambda g: a._accum(g * keep))


def relu(a):
    """max(0, a) with subgradient 0 at the kink."""
    return clampmin(a, 0.0)


def leaky_relu(a, slope=0.01):
    a = as_node(a)
    pos = a.value > 0
    factor = np.where(pos, 1.0, slope)
    return _make(a.value * factor, (a,), lambda g: a._accum(g * factor))


_UNARY = {"neg": neg, "log": log, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind, a, b=None, c=None):
    """Dispatch by name: add, sub, mul, neg, log, exp, clampmin(c), scale(c)."""
    if op_kind in _BINARY:
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind == "clampmin":
        return clampmin(a, c)
    if op_kind == "scale":
        return scale(a, c)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a, mask=None):
    a = as_node(a)
    if mask is None:
        return _make(np.array(a.value.sum()), (a,), lambda g: a._accum(np.full(a.shape, float(g))))
    m = _as_array(mask)
    if m.shape != a.shape:
        raise ShapeError(f"mask shape {m.shape} vs {a.shape}")
    return _make(np.array((a.value * m).sum()), (a,), lambda g: a._accum(float(g) * m))


def reduce_mean(a):
    a = as_node(a)
    return scale(reduce_sum(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# sliding-window volume ops
# ---------------------------------------------------------------------------

def conv3d(a, kernel):
    """Same-size zero-padded correlation with a constant kernel."""
    a = as_node(a)
    if not isinstance(kernel, Kernel3):
        kernel = Kernel3(kernel)
    w = kernel.weights
    if a.value.ndim != 3:
        raise ShapeError(f"conv3d needs a 3D value, got {a.shape}")
    flipped = w[::-1, ::-1, ::-1]
    out = kernels.correlate3d(a.value, w)
    return _make(out, (a,), lambda g: a._accum(kernels.correlate3d(g, flipped)))


def maxpool3d(a, window=3):
    """Stride-1 windowed max, zero padded; ties go to the first tap in scan order."""
    a = as_node(a)
    if window % 2 == 0:
        raise ShapeError("window must be odd")
    if a.value.ndim != 3:
        raise ShapeError(f"maxpool3d needs a 3D value, got {a.shape}")
    out, arg = kernels.maxpool3d(a.value, window)
    return _make(out, (a,), lambda g: a._accum(kernels.maxpool3d_backward(g, arg, window)))


def channel_softmax(logits):
    """Two-way softmax per voxel; returns (p0, p1)."""
    a, b = (as_node(x) for x in logits)
    if a.shape != b.shape:
        raise ShapeError(f"channel shapes differ: {a.shape} vs {b.shape}")
    d = b.value - a.value
    # keeps both probabilities strictly inside (0, 1) in float64
    live = np.abs(d) < 35.0
    d = np.clip(d, -35.0, 35.0)
    p1 = 1.0 / (1.0 + np.exp(-d))
    p0 = 1.0 / (1.0 + np.exp(d))
    s = p0 * p1 * live

    def bw0(g):
        a._accum(g * s)
        b._accum(-g * s)

    def bw1(g):
        a._accum(-g * s)
        b._accum(g * s)
    return _make(p0, (a, b), bw0), _make(p1, (a, b), bw1)


# ---------------------------------------------------------------------------
# network ops on channel-first (C, X, Y, Z) values
# ---------------------------------------------------------------------------

def _im2col(xp, k, dims):
    """(C, X+2r, Y+2r, Z+2r) padded input -> (C*k^3, X*Y*Z) patch matrix."""
    c = xp.shape[0]
    v = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    return np.ascontiguousarray(v.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c * k ** 3, -1)


def conv_layer(x, w, b=None):
    """Multi-channel same-size conv with learnable weights ``(Co, Ci, k, k, k)``."""
    x, w = as_node(x), as_node(w)
    ci, *dims = x.shape
    co, ci_w, k, _, _ = w.shape
    if ci != ci_w:
        raise ShapeError(f"conv_layer: input has {ci} channels, weights expect {ci_w}")
    r = k // 2
    cols = _im2col(np.pad(x.value, ((0, 0), (r, r), (r, r), (r, r))), k, dims)
    w2 = w.value.reshape(co, -1)
    out = w2 @ cols
    parents = [x, w]
    if b is not None:
        b = as_node(b)
        out += b.value[:, None]
        parents.append(b)
    out = out.reshape(co, *dims)

    def bw(g):
        g2 = g.reshape(co, -1)
        if w.requires_grad:
            w._accum((g2 @ cols.T).reshape(w.shape))
        if x.requires_grad:
            # input gradient = correlation of g with the flipped, channel-swapped kernel
            wt = w.value[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(ci, -1)
            gcols = _im2col(np.pad(g, ((0, 0), (r, r), (r, r), (r, r))), k, dims)
            x._accum((wt @ gcols).reshape(ci, *dims))
        if b is not None:
            b._accum(g2.sum(axis=1))
    return _make(out, parents, bw)


def instance_norm(x, eps=1e-5):
    x = as_node(x)
    axes = tuple(range(1, x.value.ndim))
    mu = x.value.mean(axis=axes, keepdims=True)
    var = x.value.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (x.value - mu) * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xh).mean(axis=axes, keepdims=True)
        x._accum(inv * (g - gm - xh * gxm))
    return _make(xh, (x,), bw)


def avgpool2(x):
    x = as_node(x)
    c, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ShapeError(f"avgpool2 needs even dims, got {x.shape}")
    out = x.value.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(2, 4, 6))

    def bw(g):
        up = np.repeat(np.repeat(np.repeat(g, 2, 1), 2, 2), 2, 3) / 8.0
        x._accum(up)
    return _make(out, (x,), bw)


def upsample2(x):
    """Nearest-neighbour x2 upsampling."""
    x = as_node(x)
    c, nx, ny, nz = x.shape
    out = np.repeat(np.repeat(np.repeat(x.value, 2, 1), 2, 2), 2, 3)

    def bw(g):
        x._accum(g.reshape(c, nx, 2, ny, 2, nz, 2).sum(axis=(2, 4, 6)))
    return _make(out, (x,), bw)


def concat(nodes):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[0] for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=0)
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            n._accum(g[lo:hi])
    return _make(out, nodes, bw)


def take(x, i):
    """``x[i]`` along the leading axis (a channel, or one entry of a vector)."""
    x = as_node(x)

    def bw(g):
        full = np.zeros_like(x.value)
        full[i] = g
        x._accum(full)
    return _make(x.value[i].copy(), (x,), bw)


channel = take
