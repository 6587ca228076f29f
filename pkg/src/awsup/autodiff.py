"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations record a node on the active :class:`Tape` whenever one of their
inputs requires a gradient. Outside a ``with Tape():`` block nothing is
recorded, which is what inference uses.

Feature maps are ``(C, H, W)`` or batched channel-major ``(C, N, H, W)``;
every spatial op accepts either layout.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, TrainingError

_TAPES = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape_id = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind, inputs, backward):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended in execution order, so every node's inputs precede it
    and the reverse sweep is a plain reversed iteration. Leaving the ``with``
    block drops the nodes: recorded tensors point back at the tape, so keeping
    them would hold every activation of the step until a cycle collection.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        self.nodes = []
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, inputs, out, backward):
        out.tape_id = len(self.nodes)
        out._tape = self
        out.requires_grad = True
        self.nodes.append(_Node(kind, inputs, backward))
        return out

    def backward(self, loss):
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        Leaf gradients accumulate across calls; call ``zero_grad`` on the
        parameters between steps. Intermediate gradients are not retained.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.tape_id >= len(self.nodes):
            raise ContractError("loss was not produced on this tape, or the tape was closed")
        pending = {loss.tape_id: np.ones_like(loss.data)}
        for idx in range(loss.tape_id, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is self:
                    prev = pending.get(t.tape_id)
                    pending[t.tape_id] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=np.float64)
                else:
                    t.grad = t.grad + gi


@contextmanager
def no_record():
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _active():
    return _TAPES[-1] if _TAPES else None


def _emit(kind, inputs, out_data, backward):
    out = Tensor(out_data)
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, backward)
    return out


def backward(loss):
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise ContractError("loss is not on any tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# Elementwise


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shapes(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _emit("div", (a, b), out, bwd)


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _emit("relu", (x,), np.where(pos, x.data, 0.0), lambda g: (g * pos,))


_OPEN_LO = np.nextafter(0.0, 1.0)
_OPEN_HI = np.nextafter(1.0, 0.0)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep saturated values inside the open interval (moves them by <= 1 ulp)
    return np.clip(out, _OPEN_LO, _OPEN_HI)


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def elementwise(op, a, b=None):
    """Dispatch by name: ``add``, ``mul``, ``relu`` or ``sigmoid``."""
    if op in ("add", "mul"):
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return (add if op == "add" else mul)(a, b)
    if op == "relu":
        return relu(a)
    if op == "sigmoid":
        return sigmoid(a)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# Reductions and reshaping


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", (x,), out, bwd)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum(sizes)[:-1]
    return _emit("concat", tuple(tensors), out, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# Spatial ops. The channel axis always comes first: (C, H, W) for one image,
# (C, N, H, W) for a batch, so a batch is just extra leading spatial extent.


def _check_map(x, op):
    if x.ndim not in (3, 4):
        raise DimensionError(f"{op}: expected (C,H,W) or (C,N,H,W), got shape {x.shape}")


def conv2d(x, kernel, bias=None, padding=None):
    """Stride-1 cross-correlation; ``padding`` defaults to "same" for odd kernels."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd = x.data
    _check_map(xd, "conv2d")
    w = kernel.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: kernel must be (C_out, C_in, k, k), got {w.shape}")
    Co, Ci, k, _ = w.shape
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size {k} is not odd")
    if xd.shape[0] != Ci:
        raise DimensionError(f"conv2d: input channel axis 0 has {xd.shape[0]}, kernel axis 1 expects {Ci}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Co,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({Co},)")
    p = (k - 1) // 2 if padding is None else int(padding)
    squeeze = xd.ndim == 3
    x4 = xd[:, None] if squeeze else xd
    _, N, H, W = x4.shape
    Ho, Wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: output spatial size {Ho}x{Wo} is empty")
    if k == 1 and p == 0:
        wm = w.reshape(Co, Ci)
        cols = x4.reshape(Ci, -1)
    else:
        wm = w.transpose(0, 2, 3, 1).reshape(Co, -1)
        xp = np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x4)
        cols = kernels.im2col(xp, k, Ho, Wo).reshape(k * k * Ci, -1)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((Co, Ho, Wo) if squeeze else (Co, N, Ho, Wo))

    def bwd(g):
        g2 = g.reshape(Co, -1)
        gw = g2 @ cols.T
        gw = gw.reshape(Co, Ci, 1, 1) if k == 1 and p == 0 else gw.reshape(Co, k, k, Ci).transpose(0, 3, 1, 2)
        if not x.requires_grad:
            gx = None
        elif k == 1 and p == 0:
            gx = (wm.T @ g2).reshape(xd.shape)
        else:
            gx = kernels.col2im((wm.T @ g2).reshape(k * k, Ci, N, Ho, Wo), k)
            if p:
                gx = gx[:, :, p:p + H, p:p + W]
            gx = gx.reshape(xd.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _emit("conv2d", inputs, out, bwd)


def maxpool2(x):
    """2x2 max pooling, stride 2."""
    x = as_tensor(x)
    xd = x.data
    _check_map(xd, "maxpool2")
    H, W = xd.shape[-2:]
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2: spatial size {H}x{W} is not even")
    out, idx = kernels.maxpool2(np.ascontiguousarray(xd.reshape(-1, H, W)))
    lead = xd.shape[:-2]

    def bwd(g):
        gx = kernels.maxpool2_backward(np.ascontiguousarray(g.reshape(-1, H // 2, W // 2)), idx)
        return (gx.reshape(xd.shape),)

    return _emit("maxpool2", (x,), out.reshape(lead + (H // 2, W // 2)), bwd)


def bilinear_upsample2x(x):
    """Align-corners bilinear resize from (H, W) to (2H, 2W)."""
    x = as_tensor(x)
    xd = x.data
    _check_map(xd, "upsample")
    H, W = xd.shape[-2:]
    if H < 1 or W < 1:
        raise DimensionError(f"upsample: empty spatial size {H}x{W}")
    lead = xd.shape[:-2]
    out = kernels.upsample2x(np.ascontiguousarray(xd.reshape(-1, H, W)))

    def bwd(g):
        gx = kernels.upsample2x_backward(np.ascontiguousarray(g.reshape(-1, 2 * H, 2 * W)))
        return (gx.reshape(xd.shape),)

    return _emit("upsample2x", (x,), out.reshape(lead + (2 * H, 2 * W)), bwd)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# Channel softmax and classification losses (channel axis 0)


def _softmax0(z):
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_channel(logits):
    """Per-pixel softmax over the class axis, computed with max subtraction."""
    logits = as_tensor(logits)
    _check_map(logits.data, "softmax_channel")
    if logits.shape[0] < 2:
        raise DimensionError("softmax_channel needs at least two classes")
    s = _softmax0(logits.data)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    return _emit("softmax", (logits,), s, bwd)


def cross_entropy(logits, labels):
    """Mean over pixels of ``-log softmax`` at the true class."""
    logits = as_tensor(logits)
    z = logits.data
    _check_map(z, "cross_entropy")
    C = z.shape[0]
    labels = np.asarray(labels)
    if labels.shape != z.shape[1:]:
        raise DimensionError(f"labels shape {labels.shape} does not match logits {z.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"label values must lie in [0, {C})")
    m = z.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=0, keepdims=True)) + m
    onehot = one_hot(labels, C)
    npix = labels.size
    loss = ((lse - z) * onehot).sum() / npix
    s = np.exp(z - lse)

    return _emit("cross_entropy", (logits,), np.asarray(loss),
                 lambda g: (g * (s - onehot) / npix,))


def one_hot(labels, C):
    """Class-first one-hot encoding: (H, W) labels -> (C, H, W)."""
    labels = np.asarray(labels)
    return (labels[None] == np.arange(C).reshape((C,) + (1,) * labels.ndim)).astype(np.float64)


# ---------------------------------------------------------------------------
# Optimizer


class AdamState:
    """Adam moments for an ordered list of parameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def copy(self):
        new = AdamState([], self.lr, self.beta1, self.beta2, self.eps)
        new.t = self.t
        new.m = [a.copy() for a in self.m]
        new.v = [a.copy() for a in self.v]
        return new


def adam_step(params, grads, state):
    """One bias-corrected Adam update applied in place to ``params``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: grad {i} shape {g.shape} != param {p.shape}")
        if not np.all(np.isfinite(g)):
            label = getattr(p, "name", None) or f"#{i}"
            raise TrainingError(f"non-finite gradient in parameter block {label}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        data = p.data if isinstance(p, Tensor) else p
        data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
