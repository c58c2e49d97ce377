"""Dense float64 tensors with a small reverse-mode gradient tape.

Only the operations the denoiser needs are provided.  Every op works on
plain :class:`Tensor` values; when a :class:`Tape` is active and any input
requires a gradient, the op records a node holding its inputs and a
vector-Jacobian closure.  Nodes are appended in creation order, which is
already a topological order, so :func:`backward` is a single reverse sweep.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError",
    "add", "sub", "mul", "neg", "scale", "tanh", "matmul", "linear",
    "reshape", "transpose", "concat", "softmax", "layer_norm",
    "avg_pool2d", "upsample2d", "channel_conv1d", "conv3d", "embedding",
    "sum", "mean", "self_attention", "backward", "gradcheck",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Immutable float64 array plus a ``requires_grad`` flag.

    Hashing and equality are by identity so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __hash__ = object.__hash__

    def __eq__(self, other):
        return self is other

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tape:
    """Records differentiable operations while active (use as a context manager)."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _make(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.nodes.append(_Node(out, tuple(inputs), vjp, op))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


# ------------------------------------------------------------------- shaping

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", y, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", y, ts, vjp)


# -------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", y, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------- linear maps

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        y = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", y, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(flat, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError("linear", weight.shape, bias.shape, detail="bias")
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[1],)) if x.ndim != 2 else y


# ------------------------------------------------------------ nonlinearities

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (a,), vjp)


def layer_norm(x, gamma=None, beta=None, eps: float = 0.0) -> Tensor:
    """Normalize over the last axis, then apply the optional per-feature affine.

    Constant groups (zero variance) normalize to zero with zero gradient.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and as_tensor(p).shape != (d,):
            raise ShapeError("layer_norm", x.shape, as_tensor(p).shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    y = _make("layer_norm", xhat, (x,), vjp)
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


# ------------------------------------------------------------- spatial ops

def _check_fhwd(op, x):
    if x.ndim != 4:
        raise ShapeError(op, x.shape, detail="expected [F,H,W,d]")


def avg_pool2d(x, factor: int) -> Tensor:
    x = as_tensor(x)
    _check_fhwd("avg_pool2d", x)
    f, h, w, d = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError("avg_pool2d", x.shape, detail=f"factor {factor} must divide H and W")
    if factor == 1:
        return x
    y = x.data.reshape(f, h // factor, factor, w // factor, factor, d).mean(axis=(2, 4))
    area = float(factor * factor)

    def vjp(g):
        g = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2)
        return (g / area,)

    return _make("avg_pool2d", y, (x,), vjp)


def upsample2d(x, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the two spatial axes."""
    x = as_tensor(x)
    _check_fhwd("upsample2d", x)
    if factor < 1:
        raise ShapeError("upsample2d", x.shape, detail=f"factor {factor}")
    if factor == 1:
        return x
    f, h, w, d = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def vjp(g):
        return (g.reshape(f, h, factor, w, factor, d).sum(axis=(2, 4)),)

    return _make("upsample2d", y, (x,), vjp)


def channel_conv1d(x, kernel) -> Tensor:
    """1-D convolution along the last (channel) axis at every site, zero padded.

    ``kernel`` has odd length j; output channel c sees channels c-j//2 .. c+j//2.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 1 or kernel.shape[0] % 2 == 0:
        raise ShapeError("channel_conv1d", x.shape, kernel.shape, detail="kernel must be 1-D with odd length")
    j = kernel.shape[0]
    half = j // 2
    d = x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    xp = np.pad(x.data, pad)
    k = kernel.data
    y = np.zeros_like(x.data)
    for o in range(j):
        y += k[o] * xp[..., o:o + d]

    def vjp(g):
        gp = np.zeros_like(xp)
        gk = np.empty(j)
        for o in range(j):
            gp[..., o:o + d] += k[o] * g
            gk[o] = np.vdot(g, xp[..., o:o + d])
        return gp[..., half:half + d], gk

    return _make("channel_conv1d", y, (x, kernel), vjp)


def conv3d(x, kernel, bias=None) -> Tensor:
    """Same-size 3-D convolution over (F, H, W) with zero padding.

    ``x`` is [F,H,W,Cin]; ``kernel`` is [kf,kh,kw,Cin,Cout] with odd extents.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_fhwd("conv3d", x)
    if kernel.ndim != 5 or kernel.shape[3] != x.shape[3] or any(s % 2 == 0 for s in kernel.shape[:3]):
        raise ShapeError("conv3d", x.shape, kernel.shape)
    f, h, w, cin = x.shape
    kf, kh, kw, _, cout = kernel.shape
    pf, ph, pw = kf // 2, kh // 2, kw // 2
    xp = np.pad(x.data, ((pf, pf), (ph, ph), (pw, pw), (0, 0)))
    offsets = [(a, b, c) for a in range(kf) for b in range(kh) for c in range(kw)]
    cols = np.concatenate([xp[a:a + f, b:b + h, c:c + w, :] for a, b, c in offsets], axis=-1)
    wmat = kernel.data.reshape(kf * kh * kw * cin, cout)
    y = cols @ wmat

    def vjp(g):
        gw = cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, cout)
        gcols = g @ wmat.T
        gp = np.zeros_like(xp)
        for i, (a, b, c) in enumerate(offsets):
            gp[a:a + f, b:b + h, c:c + w, :] += gcols[..., i * cin:(i + 1) * cin]
        return gp[pf:pf + f, ph:ph + h, pw:pw + w, :], gw.reshape(kernel.shape)

    out = _make("conv3d", y, (x, kernel), vjp)
    if bias is not None:
        out = add(out, bias)
    return out


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    y = table.data[ids]

    def vjp(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make("embedding", y, (table,), vjp)


# ---------------------------------------------------------------- attention

def self_attention(x, wq, wk, wv, wo, heads: int = 1) -> Tensor:
    """Scaled dot-product self-attention over the rows of ``x`` [L, d]."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("self_attention", x.shape, detail="expected [L, d]")
    seq, d = x.shape
    if d % heads:
        raise ShapeError("self_attention", x.shape, detail=f"d={d} not divisible by heads={heads}")
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (seq, heads, dh)), (1, 0, 2))

    q, k, v = split(linear(x, wq)), split(linear(x, wk)), split(linear(x, wv))
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    ctx = matmul(softmax(scores, axis=-1), v)
    ctx = reshape(transpose(ctx, (1, 0, 2)), (seq, d))
    return linear(ctx, wo)


# ------------------------------------------------------------------ backward

def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Reverse sweep over ``tape`` from scalar ``loss``.

    Returns a dict keyed like ``params`` (names for a mapping, tensors for an
    iterable).  Parameters the loss never touched get zero gradients.  With
    ``params=None`` the map holds every leaf tensor that requires a gradient.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
            leaves.setdefault(key, inp)
    if params is None:
        return {t: grads[k] for k, t in leaves.items() if k in grads and k not in produced}
    if isinstance(params, Mapping):
        return {name: grads.get(id(p), np.zeros(p.shape)) for name, p in params.items()}
    return {p: grads.get(id(p), np.zeros(p.shape)) for p in params}


def gradcheck(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
              coords: Sequence[int] | None = None) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor.  ``coords``
    optionally restricts the check to a subset of flat indices.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    if not np.all(np.isfinite(base)):
        bad = int(np.flatnonzero(~np.isfinite(base))[0])
        raise NonFiniteError(f"gradcheck: input not finite at coordinate {bad}")
    xt = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    analytic = backward(tape, out, [xt])[xt].reshape(-1)
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    flat = base.reshape(-1)
    for i in idx:
        hi, lo = flat.copy(), flat.copy()
        hi[i] += eps
        lo[i] -= eps
        fp = f(Tensor(hi.reshape(base.shape))).item()
        fm = f(Tensor(lo.reshape(base.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"gradcheck: non-finite value perturbing coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(numeric))
        worst = max(worst, err)
    return worst
