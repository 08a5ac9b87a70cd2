"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation used by the diffusion, attack, and rendering code is
registered here with an exact vector-Jacobian product. Tensors are
immutable: the wrapped array is marked read-only and public constructors
copy their input, so values can be shared freely across threads.
"""

from __future__ import annotations

import numpy as np

from ..errors import NonDifferentiableError, ShapeError

__all__ = [
    "Tensor", "leaf", "constant", "backward", "grad", "finite_diff",
    "add", "sub", "mul", "div", "neg", "pow_const", "exp", "log", "sqrt",
    "sin", "cos", "tanh", "sigmoid", "relu", "clip", "matmul", "conv2d",
    "avgpool2d", "upsample2d", "softmax", "log_softmax", "tsum", "tmean", "take",
    "reshape", "transpose", "concat", "sign", "floor", "custom_node",
    "registered_ops",
]

# Ops with a vjp of None are forward-only; backward through them raises.
_REGISTRY: dict[str, bool] = {}


def _register(name, differentiable=True):
    _REGISTRY[name] = differentiable
    return name


def registered_ops():
    """Names of all registered ops, mapped to whether they carry a derivative."""
    return dict(_REGISTRY)


class Tensor:
    """Immutable float64 array plus the graph edge that produced it."""

    __slots__ = ("values", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, values, requires_grad=False):
        arr = np.array(values, dtype=np.float64)  # copies: callers may mutate theirs
        arr.flags.writeable = False
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self):
        return list(self.values.shape)

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return pow_const(self, c)

    def __getitem__(self, key):
        return _getitem(self, key)


def leaf(values):
    """Differentiation root: a tensor gradients are taken with respect to."""
    return Tensor(values, requires_grad=True)


def constant(values):
    """Tensor that never receives a gradient."""
    return Tensor(values, requires_grad=False)


def _wrap(arr, parents, vjp, op):
    """Internal constructor: owns `arr`, records graph edges only when needed."""
    out = Tensor.__new__(Tensor)
    arr = np.asarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    out.values = arr
    tracked = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    if tracked:
        out.requires_grad = True
        out._parents = tuple(p if isinstance(p, Tensor) else None for p in parents)
        out._vjp = vjp
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out._op = op
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return _wrap(a.values + b.values, (a, b), vjp, _register("add"))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)

    return _wrap(a.values - b.values, (a, b), vjp, _register("sub"))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (_unbroadcast(g * b.values, a.values.shape),
                _unbroadcast(g * a.values, b.values.shape))

    return _wrap(a.values * b.values, (a, b), vjp, _register("mul"))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (_unbroadcast(g / b.values, a.values.shape),
                _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))

    return _wrap(a.values / b.values, (a, b), vjp, _register("div"))


def neg(a):
    a = _as_tensor(a)
    return _wrap(-a.values, (a,), lambda g: (-g,), _register("neg"))


def pow_const(a, c):
    a = _as_tensor(a)
    c = float(c)

    def vjp(g):
        return (g * c * a.values ** (c - 1.0),)

    return _wrap(a.values ** c, (a,), vjp, _register("pow_const"))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.values)
    return _wrap(out, (a,), lambda g: (g * out,), _register("exp"))


def log(a):
    a = _as_tensor(a)
    return _wrap(np.log(a.values), (a,), lambda g: (g / a.values,), _register("log"))


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.values)
    return _wrap(out, (a,), lambda g: (g * 0.5 / out,), _register("sqrt"))


def sin(a):
    a = _as_tensor(a)
    return _wrap(np.sin(a.values), (a,), lambda g: (g * np.cos(a.values),), _register("sin"))


def cos(a):
    a = _as_tensor(a)
    return _wrap(np.cos(a.values), (a,), lambda g: (-g * np.sin(a.values),), _register("cos"))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.values)
    return _wrap(out, (a,), lambda g: (g * (1.0 - out * out),), _register("tanh"))


def sigmoid(a):
    a = _as_tensor(a)
    v = a.values
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _wrap(out, (a,), lambda g: (g * out * (1.0 - out),), _register("sigmoid"))


def relu(a):
    a = _as_tensor(a)
    mask = a.values > 0  # subgradient 0 at the kink
    return _wrap(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), _register("relu"))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; subgradient is 1 strictly inside, 0 at and beyond the bounds."""
    a = _as_tensor(a)
    lo, hi = float(lo), float(hi)
    mask = (a.values > lo) & (a.values < hi)
    return _wrap(np.clip(a.values, lo, hi), (a,), lambda g: (g * mask,), _register("clip"))


def sign(a):
    a = _as_tensor(a)
    return _wrap(np.sign(a.values), (a,), None, _register("sign", differentiable=False))


def floor(a):
    a = _as_tensor(a)
    return _wrap(np.floor(a.values), (a,), None, _register("floor", differentiable=False))


# ---------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g @ b.values.T if need_a else None,
                a.values.T @ g if need_b else None)

    return _wrap(a.values @ b.values, (a, b), vjp, _register("matmul"))


def _patches(xp, kh, kw):
    # (N, C, Hp, Wp) -> (N, C, Ho, Wo, kh, kw) view
    return np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))


def conv2d(x, w, b=None, pad=0):
    """2-d cross-correlation, stride 1, zero padding `pad`; NCHW layout."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {w.shape}")
    if x.values.shape[1] != w.values.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: {x.shape} vs {w.shape}")
    cout, cin, kh, kw = w.values.shape
    pad = int(pad)
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.values
    pat = _patches(xp, kh, kw)
    out = np.einsum("nchwkl,ockl->nohw", pat, w.values, optimize=True)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out = out + b.values[None, :, None, None]
        parents.append(b)

    need_x, need_w = x.requires_grad, w.requires_grad

    def vjp(g):
        dw = np.einsum("nchwkl,nohw->ockl", pat, g, optimize=True) if need_w else None
        dx = None
        if need_x:
            full = kh - 1
            gp = np.pad(g, ((0, 0), (0, 0), (full, full), (full, full)))
            gpat = _patches(gp, kh, kw)
            wrot = w.values[:, :, ::-1, ::-1]
            dxp = np.einsum("nohwkl,ockl->nchw", gpat, wrot, optimize=True)
            if pad:
                dx = dxp[:, :, pad:pad + x.values.shape[2], pad:pad + x.values.shape[3]]
            else:
                dx = dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _wrap(out, tuple(parents), vjp, _register("conv2d"))


def avgpool2d(x, k=2):
    """Non-overlapping k-by-k average pooling. Spatial dims must divide k."""
    x = _as_tensor(x)
    n, c, h, w = x.values.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: spatial dims {h}x{w} not divisible by {k}")
    blocks = x.values.reshape(n, c, h // k, k, w // k, k)
    out = blocks.mean(axis=(3, 5))

    def vjp(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (up,)

    return _wrap(out, (x,), vjp, _register("avgpool2d"))


def upsample2d(x, k=2):
    """Nearest-neighbor spatial upsampling by factor k."""
    x = _as_tensor(x)
    if x.values.ndim != 4:
        raise ShapeError(f"upsample2d expects NCHW input, got {x.shape}")
    out = np.repeat(np.repeat(x.values, k, axis=2), k, axis=3)

    def vjp(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // k, k, w // k, k).sum(axis=(3, 5)),)

    return _wrap(out, (x,), vjp, _register("upsample2d"))


# ---------------------------------------------------------------------------
# softmax family, reductions, indexing, shaping

def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    v = x.values
    m = v.max(axis=axis, keepdims=True)
    s = v - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _wrap(out, (x,), vjp, _register("log_softmax"))


def softmax(x, axis=-1):
    x = _as_tensor(x)
    v = x.values
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _wrap(p, (x,), vjp, _register("softmax"))


def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a % x.values.ndim for a in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.values.shape).copy(),)

    return _wrap(out, (x,), vjp, _register("sum"))


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.values.mean(axis=axis, keepdims=keepdims)
    count = x.values.size / max(out.size, 1)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a % x.values.ndim for a in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.values.shape).copy() / count,)

    return _wrap(out, (x,), vjp, _register("mean"))


def take(x, indices, axis=0):
    """Gather rows along `axis` (embedding lookup / label selection)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.values, idx, axis=axis)

    def vjp(g):
        dx = np.zeros_like(x.values)
        np.add.at(np.moveaxis(dx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (dx,)

    return _wrap(out, (x,), vjp, _register("take"))


def _getitem(x, key):
    x = _as_tensor(x)
    out = x.values[key]

    def vjp(g):
        dx = np.zeros_like(x.values)
        dx[key] = g
        return (dx,)

    return _wrap(np.array(out), (x,), vjp, _register("getitem"))


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.values.shape
    return _wrap(x.values.reshape(shape), (x,),
                 lambda g: (g.reshape(old),), _register("reshape"))


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _wrap(x.values.transpose(axes), (x,),
                 lambda g: (g.transpose(inverse),), _register("transpose"))


def custom_node(values, parents, vjp, op):
    """Graph node for a fused operation with a hand-written vjp.

    `vjp(g)` must return one gradient (or None) per parent, in order.
    """
    _register(op)
    return _wrap(values, tuple(parents), vjp, op)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.values.shape[axis] for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _wrap(out, tuple(tensors), vjp, _register("concat"))


# ---------------------------------------------------------------------------
# backward pass and gradient API

def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p is not None and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, wrt):
    """Gradients of a scalar `loss` with respect to each tensor in `wrt`.

    Returns plain float64 arrays. Raises if the loss is not scalar or if the
    graph contains a node without a registered derivative.
    """
    if loss.values.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None or not node._parents:
            continue
        if node._vjp is None:
            raise NonDifferentiableError(f"non-differentiable node: {node._op}")
        parent_grads = node._vjp(np.asarray(g, dtype=np.float64))
        for p, pg in zip(node._parents, parent_grads):
            if p is None or not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return [grads.get(id(w), np.zeros_like(w.values)) for w in wrt]


def grad(loss_fn, inputs):
    """Exact gradient of a scalar-valued function at the given inputs.

    `loss_fn` receives one leaf Tensor per input and must return a scalar
    Tensor built from registered operations.
    """
    leaves = [x if isinstance(x, Tensor) and x.requires_grad else leaf(
        x.values if isinstance(x, Tensor) else x) for x in inputs]
    loss = loss_fn(*leaves)
    if not isinstance(loss, Tensor):
        raise ShapeError("loss_fn must return a Tensor")
    return [Tensor(g) for g in backward(loss, leaves)]


def finite_diff(loss_fn, inputs, h=1e-5):
    """Central-difference gradient estimate, the verification oracle for grad.

    Evaluates loss_fn once per perturbed coordinate; independent of the
    backward machinery above.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    base = [np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
            for x in inputs]

    def evaluate(arrays):
        out = loss_fn(*[constant(a) for a in arrays])
        return float(out.values)

    grads = []
    for k, arr in enumerate(base):
        g = np.zeros_like(arr)
        flat = g.reshape(-1)
        for i in range(arr.size):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[k].reshape(-1)[i] += h
            minus[k].reshape(-1)[i] -= h
            flat[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
        grads.append(Tensor(g))
    return grads
