"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every differentiable computation in the package goes through :func:`forward_op`,
which evaluates an op eagerly with numpy and, when any input requires a
gradient, appends a record to the active :class:`Tape`.  :func:`backward`
replays the tape in exact reverse order.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = (x * x).sum()
    ...     backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericError",
    "ShapeError",
    "TapeError",
    "forward_op",
    "backward",
    "grad_check",
    "current_tape",
    "no_grad",
    "OPS",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are not conformant for an op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a tape (consumed twice, non-scalar loss, foreign loss)."""


class Tensor:
    """Dense float64 array that can take part in gradient recording.

    Tensors are immutable after creation apart from ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_leaf")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None
        self._leaf = True

    # -- array-ish conveniences -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ---------------------------------------------------------
    def __add__(self, other):
        return forward_op("add", self, other)

    def __radd__(self, other):
        return forward_op("add", other, self)

    def __sub__(self, other):
        return forward_op("sub", self, other)

    def __rsub__(self, other):
        return forward_op("sub", other, self)

    def __mul__(self, other):
        return forward_op("mul", self, other)

    def __rmul__(self, other):
        return forward_op("mul", other, self)

    def __neg__(self):
        return forward_op("mul", self, -1.0)

    def __matmul__(self, other):
        return forward_op("matmul", self, other)

    def __getitem__(self, key):
        return forward_op("slice", self, key=key)

    def sum(self, axis=None, keepdims=False):
        return forward_op("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return forward_op("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op("reshape", self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return forward_op("transpose", self, axes=axes or None)

    @property
    def T(self):
        return self.transpose()


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tape:
    """Ordered record of executed ops.  Usable as a context manager."""

    def __init__(self):
        self.records = []
        self.consumed = False
        self._leaves = {}

    def record(self, op, inputs, output, ctx):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape; open a new Tape")
        output._tape = self
        output._leaf = False
        for t in inputs:
            if t._leaf and t.requires_grad:
                self._leaves[id(t)] = t
        self.records.append((op, inputs, output, ctx))

    def clear(self):
        """Drop all records and invalidate gradients of every recorded leaf."""
        for leaf in self._leaves.values():
            leaf.grad = None
        self.records.clear()
        self._leaves.clear()
        self.consumed = False

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False


_TAPES = []
_DEFAULT = [Tape()]
_GRAD_ENABLED = [True]


def current_tape():
    if _TAPES:
        return _TAPES[-1]
    if _DEFAULT[0].consumed:
        _DEFAULT[0] = Tape()
    return _DEFAULT[0]


class no_grad:
    """Context manager disabling tape recording (inference)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


# ---------------------------------------------------------------------------
# Op registry
# ---------------------------------------------------------------------------


class Op:
    """Forward returns ``(out, ctx)``; backward maps ``(ctx, grad)`` to input grads."""

    def __init__(self, name, forward, backward):
        self.name = name
        self.forward = forward
        self.backward = backward

    def __repr__(self):
        return f"Op({self.name})"


OPS = {}


def register(name):
    def wrap(cls_or_pair):
        fwd, bwd = cls_or_pair()
        OPS[name] = Op(name, fwd, bwd)
        return cls_or_pair

    return wrap


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_op(name, *inputs, **attrs):
    """Evaluate op ``name`` eagerly and record it on the active tape if needed."""
    try:
        op = OPS[name]
    except KeyError:
        raise ValueError(f"unknown op {name!r}") from None
    tensors = tuple(_as_tensor(x) for x in inputs)
    arrays = [t.data for t in tensors]
    try:
        out, ctx = op.forward(*arrays, **attrs)
    except ShapeError:
        raise
    except ValueError as exc:
        # Domain errors subclass ValueError and carry their own message.
        if type(exc) is not ValueError:
            raise
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{name}: incompatible shapes ({shapes}): {exc}") from exc
    if not np.isfinite(out).all():
        raise NumericError(f"{name} produced non-finite values")
    needs = _GRAD_ENABLED[0] and any(t.requires_grad for t in tensors)
    result = Tensor(out, requires_grad=needs)
    if needs:
        current_tape().record(op, tensors, result, ctx)
    return result


def backward(loss):
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise TapeError(f"backward needs a scalar loss, got shape {shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not on any tape (no input required grad)")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    grads = {id(loss): np.ones_like(loss.data)}
    for op, inputs, output, ctx in reversed(tape.records):
        g = grads.pop(id(output), None)
        if g is None:
            continue
        in_grads = op.backward(ctx, g)
        for t, ig in zip(inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if t._leaf:
                ig = np.asarray(ig, dtype=DTYPE).reshape(t.data.shape)
                t.grad = ig.copy() if t.grad is None else t.grad + ig
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
    tape.consumed = True


def grad_check(f, x, h=1e-4):
    """Worst per-tensor relative error between analytic and central-difference gradients.

    ``x`` is a leaf tensor or a list of them; ``f`` maps them to a scalar
    tensor and must be deterministic (not detected).  For each tensor the
    error is ``||g_a - g_n|| / max(||g_a||, ||g_n||, 1e-8)``; the norm form
    keeps components whose true gradient sits at the finite-difference
    round-off level from dominating.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        loss = f(*xs) if not isinstance(x, Tensor) else f(x)
        backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    def value():
        with no_grad():
            out = f(*xs) if not isinstance(x, Tensor) else f(x)
        return float(out.data)

    worst = 0.0
    for t, ga in zip(xs, analytic):
        flat = t.data.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        ga = ga.reshape(-1)
        denom = max(np.linalg.norm(ga), np.linalg.norm(num), 1e-8)
        worst = max(worst, float(np.linalg.norm(ga - num) / denom))
    return worst


# ---------------------------------------------------------------------------
# Op implementations
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None


@register("add")
def _add():
    def fwd(a, b):
        _check_broadcast("add", a, b)
        return a + b, (a.shape, b.shape)

    def bwd(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return fwd, bwd


@register("sub")
def _sub():
    def fwd(a, b):
        _check_broadcast("sub", a, b)
        return a - b, (a.shape, b.shape)

    def bwd(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return fwd, bwd


@register("mul")
def _mul():
    def fwd(a, b):
        _check_broadcast("mul", a, b)
        return a * b, (a, b)

    def bwd(ctx, g):
        a, b = ctx
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, bwd


@register("matmul")
def _matmul():
    def fwd(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} not aligned")
        return np.matmul(a, b), (a, b)

    def bwd(ctx, g):
        a, b = ctx
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return fwd, bwd


@register("concat")
def _concat():
    def fwd(*xs, axis=-1):
        out = np.concatenate(xs, axis=axis)
        ax = axis % out.ndim
        return out, (ax, [x.shape[ax] for x in xs])

    def bwd(ctx, g):
        ax, sizes = ctx
        cuts = np.cumsum(sizes)[:-1]
        return np.split(g, cuts, axis=ax)

    return fwd, bwd


@register("stack")
def _stack():
    def fwd(*xs, axis=0):
        out = np.stack(xs, axis=axis)
        return out, (axis % out.ndim, len(xs))

    def bwd(ctx, g):
        ax, n = ctx
        return [np.take(g, i, axis=ax) for i in range(n)]

    return fwd, bwd


@register("slice")
def _slice():
    def fwd(x, key):
        out = x[key]
        if not isinstance(out, np.ndarray):
            out = np.asarray(out)
        else:
            out = np.ascontiguousarray(out)
        return out, (x.shape, key)

    def bwd(ctx, g):
        shape, key = ctx
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return fwd, bwd


@register("reshape")
def _reshape():
    def fwd(x, shape):
        return x.reshape(shape), x.shape

    def bwd(ctx, g):
        return (g.reshape(ctx),)

    return fwd, bwd


@register("transpose")
def _transpose():
    def fwd(x, axes=None):
        axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        return np.ascontiguousarray(np.transpose(x, axes)), axes

    def bwd(ctx, g):
        return (np.transpose(g, np.argsort(ctx)),)

    return fwd, bwd


@register("tanh")
def _tanh():
    def fwd(x):
        y = np.tanh(x)
        return y, y

    def bwd(y, g):
        return (g * (1.0 - y * y),)

    return fwd, bwd


def _sigmoid_arr(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@register("sigmoid")
def _sigmoid():
    def fwd(x):
        y = _sigmoid_arr(x)
        return y, y

    def bwd(y, g):
        return (g * y * (1.0 - y),)

    return fwd, bwd


@register("relu")
def _relu():
    def fwd(x):
        mask = x > 0
        return x * mask, mask

    def bwd(mask, g):
        return (g * mask,)

    return fwd, bwd


@register("exp")
def _exp():
    def fwd(x):
        y = np.exp(x)
        return y, y

    def bwd(y, g):
        return (g * y,)

    return fwd, bwd


@register("log")
def _log():
    def fwd(x):
        if (x <= 0).any():
            raise NumericError("log of non-positive value")
        return np.log(x), x

    def bwd(x, g):
        return (g / x,)

    return fwd, bwd


def softmax_arr(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_arr(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def logsumexp_arr(x, axis=-1, keepdims=False):
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


@register("softmax")
def _softmax():
    def fwd(x, axis=-1):
        y = softmax_arr(x, axis)
        return y, (y, axis)

    def bwd(ctx, g):
        y, axis = ctx
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return fwd, bwd


@register("log_softmax")
def _log_softmax():
    def fwd(x, axis=-1):
        y = log_softmax_arr(x, axis)
        return y, (y, axis)

    def bwd(ctx, g):
        y, axis = ctx
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return fwd, bwd


@register("logsumexp")
def _logsumexp():
    def fwd(x, axis=-1, keepdims=False):
        out = logsumexp_arr(x, axis=axis, keepdims=True)
        p = np.exp(x - out)
        return (out if keepdims else np.squeeze(out, axis=axis)), (p, axis, keepdims)

    def bwd(ctx, g):
        p, axis, keepdims = ctx
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return fwd, bwd


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register("sum")
def _sum():
    def fwd(x, axis=None, keepdims=False):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims)), (x.shape, _norm_axes(axis, x.ndim), keepdims)

    def bwd(ctx, g):
        shape, axes, keepdims = ctx
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return fwd, bwd


@register("mean")
def _mean():
    def fwd(x, axis=None, keepdims=False):
        axes = _norm_axes(axis, x.ndim)
        n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        return np.asarray(x.mean(axis=axis, keepdims=keepdims)), (x.shape, axes, keepdims, n)

    def bwd(ctx, g):
        shape, axes, keepdims, n = ctx
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return fwd, bwd


@register("conv2d")
def _conv2d():
    """Stride-1 cross-correlation.  x: (B, Cin, H, W), w: (Cout, Cin, kh, kw)."""

    def fwd(x, w, b=None, padding=(0, 0)):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with filters {w.shape}")
        ph, pw = padding
        kh, kw = w.shape[2:]
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        H = xp.shape[2] - kh + 1
        W = xp.shape[3] - kw + 1
        if H < 1 or W < 1:
            raise ShapeError(f"conv2d: input {x.shape} smaller than filter {w.shape[2:]} after padding {padding}")
        out = np.zeros((x.shape[0], w.shape[0], H, W))
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + H, j : j + W]
                out += np.einsum("bchw,oc->bohw", patch, w[:, :, i, j], optimize=True)
        if b is not None:
            if b.shape != (w.shape[0],):
                raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[0]} filters")
            out += b[None, :, None, None]
        return out, (xp, w, padding, b is not None)

    def bwd(ctx, g):
        xp, w, (ph, pw), has_b = ctx
        kh, kw = w.shape[2:]
        H, W = g.shape[2:]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + H, j : j + W]
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
                gxp[:, :, i : i + H, j : j + W] += np.einsum("bohw,oc->bchw", g, w[:, :, i, j], optimize=True)
        gx = gxp[:, :, ph : gxp.shape[2] - ph, pw : gxp.shape[3] - pw]
        grads = [gx, gw]
        if has_b:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return fwd, bwd


@register("maxpool2d")
def _maxpool2d():
    """Non-overlapping max pooling over the last two axes, ceil mode."""

    def fwd(x, size=(2, 2)):
        sh, sw = size
        B, C, H, W = x.shape
        Ho, Wo = -(-H // sh), -(-W // sw)
        xp = np.full((B, C, Ho * sh, Wo * sw), -np.inf)
        xp[:, :, :H, :W] = x
        win = xp.reshape(B, C, Ho, sh, Wo, sw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, sh * sw)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx, size)

    def bwd(ctx, g):
        (B, C, H, W), idx, (sh, sw) = ctx
        Ho, Wo = g.shape[2:]
        win = np.zeros((B, C, Ho, Wo, sh * sw))
        np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
        gx = win.reshape(B, C, Ho, Wo, sh, sw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * sh, Wo * sw)
        return (gx[:, :, :H, :W],)

    return fwd, bwd


@register("embed")
def _embed():
    def fwd(table, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(f"embed: id out of range for table of {table.shape[0]} rows")
        return table[ids], (table.shape, ids)

    def bwd(ctx, g):
        shape, ids = ctx
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return fwd, bwd


# "embed-lookup" is the documented name of the same op
OPS["embed-lookup"] = OPS["embed"]


# -- functional aliases ---------------------------------------------------------


def add(a, b):
    return forward_op("add", a, b)


def sub(a, b):
    return forward_op("sub", a, b)


def mul(a, b):
    return forward_op("mul", a, b)


def matmul(a, b):
    return forward_op("matmul", a, b)


def concat(xs, axis=-1):
    return forward_op("concat", *xs, axis=axis)


def stack(xs, axis=0):
    return forward_op("stack", *xs, axis=axis)


def tanh(x):
    return forward_op("tanh", x)


def sigmoid(x):
    return forward_op("sigmoid", x)


def relu(x):
    return forward_op("relu", x)


def exp(x):
    return forward_op("exp", x)


def log(x):
    return forward_op("log", x)


def softmax(x, axis=-1):
    return forward_op("softmax", x, axis=axis)


def log_softmax(x, axis=-1):
    return forward_op("log_softmax", x, axis=axis)


def logsumexp(x, axis=-1, keepdims=False):
    return forward_op("logsumexp", x, axis=axis, keepdims=keepdims)


def conv2d(x, w, b=None, padding=(0, 0)):
    if b is None:
        return forward_op("conv2d", x, w, padding=tuple(padding))
    return forward_op("conv2d", x, w, b, padding=tuple(padding))


def maxpool2d(x, size=(2, 2)):
    return forward_op("maxpool2d", x, size=tuple(size))


def embed(table, ids):
    return forward_op("embed", table, ids=ids)
