"""Dense tensors with a reverse-mode tape.

Every forward op is a plain function returning a new immutable ``Tensor``.
When a :class:`Tape` is active and any input requires a gradient, the op
appends a node holding a backward closure; ``Tape.backward`` walks those
nodes once, newest first.

Kernel offsets are always visited kernel-row-major (``ki`` outer, ``kj``
inner), channels innermost; no op reassociates its reductions between runs.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()

DEFAULT_DTYPE = np.float32


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-d array value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "decay")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # numpy scalars (e.g. the sum of two 0-d arrays) keep their precision too
            floating = isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f"
            dtype = data.dtype if floating else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name
        # weight-decay eligibility, only meaningful on leaf parameters
        self.decay = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name=None, decay=True, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.decay = decay


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Gradients:
    """Leaf gradients keyed by tensor identity; absent leaves read as zeros."""

    def __init__(self, grads: dict, tensors: dict):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self):
        return len(self._grads)

    def items(self):
        for k, g in self._grads.items():
            yield self._tensors[k], g


class Tape:
    """Records differentiable ops executed inside a ``with`` block."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._consumed = False

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(TapeNode(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> Gradients:
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward")
        self._consumed = True
        produced = {id(n.output) for n in self.nodes}
        grads = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                k = id(t)
                if k not in produced:
                    leaves[k] = t
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        out = {k: grads[k].astype(leaves[k].dtype, copy=False) for k in leaves if k in grads}
        if id(loss) not in produced and loss.requires_grad:
            out[id(loss)] = np.ones_like(loss.data)
            leaves[id(loss)] = loss
        return Gradients(out, leaves)


def _emit(op: str, data: np.ndarray, inputs: Sequence, backward: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(op, tuple(inputs), out, backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair_dtype(a, b):
    for v in (a, b):
        if isinstance(v, Tensor):
            return v.dtype
    return DEFAULT_DTYPE


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    dt = _pair_dtype(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    dt = _pair_dtype(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    dt = _pair_dtype(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    dt = _pair_dtype(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _emit("div", out, (a, b), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    """``x ** exponent`` for a constant real exponent; zero base gets zero slope."""
    x = as_tensor(x)
    p = float(exponent)
    xd = x.data
    out = xd**p if p != 1.0 else xd.copy()

    def backward(g):
        if p == 1.0:
            return (g,)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = p * np.where(xd != 0, xd ** (p - 1.0), 0.0)
        return (g * slope.astype(xd.dtype),)

    return _emit("pow", out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def arctan(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("arctan", np.arctan(xd), (x,), lambda g: (g / (1.0 + xd * xd),))


def minimum(a, b) -> Tensor:
    dt = _pair_dtype(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(np.where(pick_a, g, 0), a.shape), _unbroadcast(np.where(pick_a, 0, g), b.shape)

    return _emit("minimum", np.minimum(a.data, b.data), (a, b), backward)


def maximum(a, b) -> Tensor:
    dt = _pair_dtype(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(np.where(pick_a, g, 0), a.shape), _unbroadcast(np.where(pick_a, 0, g), b.shape)

    return _emit("maximum", np.maximum(a.data, b.data), (a, b), backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data > lo
    out = np.where(keep, x.data, np.asarray(lo, x.dtype))
    return _emit("clamp_min", out, (x,), lambda g: (np.where(keep, g, 0).astype(g.dtype),))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _emit("relu", np.where(keep, x.data, 0).astype(x.dtype), (x,), lambda g: (g * keep,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data).astype(x.dtype, copy=False)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_np(xd).astype(x.dtype, copy=False)
    return _emit("silu", xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def hardswish(x: Tensor) -> Tensor:
    xd = x.data
    out = xd * np.clip(xd + 3.0, 0.0, 6.0) / 6.0

    def backward(g):
        slope = np.where(xd < -3.0, 0.0, np.where(xd > 3.0, 1.0, (2.0 * xd + 3.0) / 6.0))
        return (g * slope.astype(xd.dtype),)

    return _emit("hardswish", out.astype(x.dtype, copy=False), (x,), backward)


ACTIVATIONS = {"silu": silu, "sigmoid": sigmoid, "hardswish": hardswish, "relu": relu}


def bce_with_logits(z: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits (target is a constant)."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=z.dtype)
    zd = z.data
    out = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))

    def backward(g):
        return (g * (_sigmoid_np(zd).astype(zd.dtype) - t),)

    return _emit("bce", out.astype(z.dtype, copy=False), (z,), backward)


# ---------------------------------------------------------------- shape ops

def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _emit("getitem", np.array(out, copy=True), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ValueError(f"concat rank mismatch: {t.shape} vs {ref}")
        for ax, (p, q) in enumerate(zip(t.shape, ref)):
            if ax != axis % len(ref) and p != q:
                raise ValueError(f"concat extent mismatch on axis {ax}: {q} vs {p}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not sum to extent {x.shape[axis]} of axis {axis}")
    outs, start = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        outs.append(getitem(x, tuple(idx)))
        start += s
    return outs


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Reshape channels to (groups, C/groups), transpose, flatten."""
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"channel_shuffle: {c} channels not divisible by {groups} groups")
    k = c // groups
    out = x.data.reshape(n, groups, k, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)

    def backward(g):
        return (g.reshape(n, k, groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w),)

    return _emit("channel_shuffle", out, (x,), backward)


def pool_h(x: Tensor) -> Tensor:
    """Mean over width: (N, C, H, W) -> (N, C, H, 1)."""
    w = x.shape[3]
    return _emit("pool_h", x.data.mean(axis=3, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / w, x.shape).astype(x.dtype),))


def pool_w(x: Tensor) -> Tensor:
    """Mean over height: (N, C, H, W) -> (N, C, 1, W)."""
    h = x.shape[2]
    return _emit("pool_w", x.data.mean(axis=2, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / h, x.shape).astype(x.dtype),))


def transpose_hw(x: Tensor) -> Tensor:
    return _emit("transpose_hw", x.data.transpose(0, 1, 3, 2).copy(), (x,), lambda g: (g.transpose(0, 1, 3, 2),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _emit("upsample2x", out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))

    def backward(g):
        mask = blocks == out[:, :, :, None, :, None]
        # first maximum in each window takes the gradient
        flat = mask.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        first = np.zeros_like(flat)
        idx = flat.argmax(axis=-1)
        np.put_along_axis(first, idx[..., None], True, axis=-1)
        first = first.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return ((first * g[:, :, :, None, :, None]).reshape(n, c, h, w).astype(x.dtype),)

    return _emit("maxpool2x2", out, (x,), backward)


# ---------------------------------------------------------------- conv / norm

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``w`` has shape (out_c, in_c // groups, k, k). Dense convolutions run as
    one GEMM over im2col rows ordered (ki, kj, c); depthwise ones accumulate
    one kernel offset at a time in the same ki-major order, which makes them
    bit-identical to a naive per-pixel loop in that order.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be rank 4 (N, C, H, W), got shape {x.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups:
        raise ValueError(f"conv2d: input channel axis ({c}) not divisible by groups ({groups})")
    if cg * groups != c:
        raise ValueError(f"conv2d: weight in-channel axis is {cg}, expected {c // groups} "
                         f"for {c} channels / {groups} groups")
    if o % groups:
        raise ValueError(f"conv2d: output channel axis ({o}) not divisible by groups ({groups})")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias axis has shape {bias.shape}, expected ({o},)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: spatial axes {h}x{wd} too small for kernel {kh}x{kw}")
    xd, wdata = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    geom = (stride, ho, wo)
    depthwise = groups == c and groups == o and cg == 1
    og = o // groups
    if groups == 1:
        out = _dense_forward(xp, wdata, geom)
    elif depthwise:
        out = np.zeros((n, o, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += _window(xp, i, j, geom) * wdata[:, 0, i, j][None, :, None, None]
    else:
        out = np.concatenate([_dense_forward(xp[:, gi * cg:(gi + 1) * cg], wdata[gi * og:(gi + 1) * og], geom)
                              for gi in range(groups)], axis=1)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wdata)
        if groups == 1:
            _dense_backward(xp, wdata, g, geom, gxp, gw)
        elif depthwise:
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (g * _window(xp, i, j, geom)).sum(axis=(0, 2, 3))
                    _window(gxp, i, j, geom)[...] += g * wdata[:, 0, i, j][None, :, None, None]
        else:
            for gi in range(groups):
                cs, os_ = slice(gi * cg, (gi + 1) * cg), slice(gi * og, (gi + 1) * og)
                _dense_backward(xp[:, cs], wdata[os_], g[:, os_], geom, gxp[:, cs], gw[os_])
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w, bias) if bias is not None else (x, w)
    return _emit("conv2d", out, inputs, backward)


def _window(arr, i, j, geom):
    stride, ho, wo = geom
    return arr[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _im2col(xp, kh, kw, geom):
    """(N, C, Hp, Wp) -> (N, kh*kw*C, Ho*Wo), rows ordered kernel-row-major then channel."""
    n, c = xp.shape[:2]
    _, ho, wo = geom
    if kh == 1 and kw == 1:
        return np.ascontiguousarray(_window(xp, 0, 0, geom)).reshape(n, c, ho * wo)
    cols = np.empty((n, kh, kw, c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = _window(xp, i, j, geom)
    return cols.reshape(n, kh * kw * c, ho * wo)


def _flat_weight(wdata):
    o, c, kh, kw = wdata.shape
    return wdata.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)


def _dense_forward(xp, wdata, geom):
    n = xp.shape[0]
    o, _, kh, kw = wdata.shape
    _, ho, wo = geom
    return np.matmul(_flat_weight(wdata), _im2col(xp, kh, kw, geom)).reshape(n, o, ho, wo)


def _dense_backward(xp, wdata, g, geom, gxp, gw):
    n = xp.shape[0]
    o, c, kh, kw = wdata.shape
    _, ho, wo = geom
    cols = _im2col(xp, kh, kw, geom)
    g2 = g.reshape(n, o, ho * wo)
    gw[...] = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
    gcols = np.matmul(_flat_weight(wdata).T, g2).reshape(n, kh, kw, c, ho, wo)
    for i in range(kh):
        for j in range(kw):
            _window(gxp, i, j, geom)[...] += gcols[:, i, j]


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.03, eps: float = 1e-3) -> Tensor:
    """Per-channel batch normalisation.

    In training mode batch moments normalise the input and the running
    buffers are updated in place (unbiased variance, like most frameworks).
    """
    if eps <= 0:
        raise ValueError(f"batchnorm eps must be positive, got {eps}")
    c = x.shape[1]
    for nm, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if arr.shape != (c,):
            raise ValueError(f"batchnorm {nm} has shape {arr.shape}, expected ({c},) for the channel axis")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat = centered * inv[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
        out = gd * xhat + beta.data[None, :, None, None]

        def backward(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            scale = (gamma.data * inv / m)[None, :, None, None]
            gx = scale * (m * g - gbeta[None, :, None, None] - xhat * ggamma[None, :, None, None])
            return gx.astype(xd.dtype), ggamma, gbeta
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)
        xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]

        def backward(g):
            return g * (gamma.data * inv)[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _emit("batchnorm2d", out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
