"""Dense n-d tensors with a reverse-mode gradient tape.

Tensors wrap a numpy array. Operations executed while a :class:`Tape` is
active record a backward closure whenever at least one operand requires a
gradient; :func:`backward` replays those closures in reverse order.

Broadcasting is deliberately narrow: elementwise binary operations accept
operands of equal shape, or one operand of shape ``()``. Anything else must go
through :func:`broadcast_to` so it shows up on the tape.
"""

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

__all__ = [
    "DimensionError",
    "NumericError",
    "Tensor",
    "Tape",
    "Gradients",
    "backward",
    "precision",
    "default_dtype",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "abs_",
    "square",
    "softplus",
    "matmul",
    "dense",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "stack",
    "getitem",
    "conv2d",
    "conv_transpose2d",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


_ids = itertools.count(1)
_dtype = np.float32
_tapes = []

# upper bound on im2col buffer size (elements) per chunk
_IM2COL_CHUNK = 1 << 23


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


def default_dtype():
    return _dtype


def _check_finite(arr, name):
    with np.errstate(all="ignore"):
        total = arr.sum()
    # the sum can overflow on large finite data; confirm before raising
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NumericError(f"{name}: non-finite values in result")


class Tensor:
    __array_priority__ = 1000
    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or _dtype)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.id = next(_ids)
        return t

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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

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


class _Record:
    __slots__ = ("out", "parents", "backward", "name")

    def __init__(self, out, parents, backward_fn, name):
        self.out = out
        self.parents = parents
        self.backward = backward_fn
        self.name = name


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations on tensors that require gradients
    are appended in execution order, which is a topological order of the
    computation graph.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def _result(arr, parents, backward_fn, name):
    _check_finite(arr, name)
    out = Tensor._wrap(arr)
    if _tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        ids = tuple(p.id if p.requires_grad else None for p in parents)
        _tapes[-1].records.append(_Record(out.id, ids, backward_fn, name))
    return out


class Gradients(dict):
    """Mapping node-id -> gradient Tensor; also indexable by the Tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__contains__(key)


def backward(tape, loss, wrt=()):
    """Reverse-accumulate d(loss)/d(leaf) over ``tape``.

    Returns a :class:`Gradients` map holding every leaf reached from the
    loss. Tensors listed in ``wrt`` that the loss does not depend on are
    included with a zero gradient.
    """
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        raise DimensionError(f"loss must be a scalar tensor, got shape {getattr(loss, 'shape', None)}")
    grads = {loss.id: np.ones_like(loss.data)}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(rec.out)
        g = grads.pop(rec.out, None)
        if g is None:
            continue
        for pid, pg in zip(rec.parents, rec.backward(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    out = Gradients()
    for key, g in grads.items():
        if key not in produced:
            out[key] = Tensor._wrap(np.asarray(g))
    for t in wrt:
        if t.id not in out:
            out[t.id] = Tensor._wrap(np.zeros_like(t.data))
    return out


# ---------------------------------------------------------------------------
# elementwise


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _pair(a, b, name):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b):
    a, b = _pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        gb = g / bd
        return _reduce_to(gb, ad.shape), _reduce_to(-gb * out, bd.shape)

    return _result(out, (a, b), bw, "div")


def _unary(x, fwd, dfdx, name):
    x = _as_tensor(x)
    xd = x.data
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fwd(xd)
    return _result(out, (x,), lambda g: (dfdx(g, xd, out),), name)


def neg(x):
    return _unary(x, np.negative, lambda g, x, y: -g, "neg")


def sigmoid(x):
    return _unary(x, expit, lambda g, x, y: g * y * (1 - y), "sigmoid")


def tanh(x):
    return _unary(x, np.tanh, lambda g, x, y: g * (1 - y * y), "tanh")


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0), lambda g, x, y: g * (x > 0), "relu")


def exp(x):
    return _unary(x, np.exp, lambda g, x, y: g * y, "exp")


def log(x):
    return _unary(x, np.log, lambda g, x, y: g / x, "log")


def abs_(x):
    return _unary(x, np.abs, lambda g, x, y: g * np.sign(x), "abs")


def square(x):
    return _unary(x, np.square, lambda g, x, y: 2 * g * x, "square")


def softplus(x):
    return _unary(x, lambda v: np.logaddexp(0, v), lambda g, x, y: g * expit(x), "softplus")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "abs": abs_,
    "square": square,
    "softplus": softplus,
}


def elementwise(kind, *operands):
    """Dispatch an elementwise operation by name, e.g. ``elementwise("tanh", x)``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def dense(x, weight, bias):
    """Affine map ``x @ weight + bias`` for x of shape [N, D]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _result(xd @ wd + bias.data, (x, weight, bias), bw, "dense")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / count)


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"reshape: {old} -> {shape}: {err}") from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x, shape):
    """Explicit numpy-style broadcast; the backward pass sums over expanded axes."""
    shape = tuple(shape)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: {old} -> {shape}") from None
    lead = len(shape) - len(old)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(old) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(out, (x,), bw, "broadcast_to")


def concat(tensors, axis=0):
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise DimensionError(f"concat: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise DimensionError(f"stack: {err}") from None
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(out, tuple(tensors), bw, "stack")


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx):
    shape, dtype = x.shape, x.dtype
    basic = _is_basic(idx)

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(np.array(x.data[idx]), (x,), bw, "getitem")


# ---------------------------------------------------------------------------
# convolution


def _out_extent(n, k, s, name):
    if n < k:
        raise DimensionError(f"{name}: extent {n} smaller than kernel {k}")
    return (n - k) // s + 1


def _im2col(x, kh, kw, s, ho, wo):
    """Patches of x [n,C,H,W] as [n, C*kh*kw, ho*wo] (row order c, i, j)."""
    n, c = x.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _chunk(n, per_item):
    return max(1, min(n, _IM2COL_CHUNK // max(per_item, 1)))


def _conv_forward(x, w, s):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = _out_extent(h, kh, s, "conv2d"), _out_extent(wd, kw, s, "conv2d")
    wf = w.reshape(f, -1)
    out = np.empty((n, f, ho * wo), dtype=np.result_type(x, w))
    step = _chunk(n, ho * wo * c * kh * kw)
    # overflow surfaces as a NumericError from the caller's finiteness check
    with np.errstate(over="ignore", invalid="ignore"):
        for b0 in range(0, n, step):
            cols = _im2col(x[b0 : b0 + step], kh, kw, s, ho, wo)
            np.matmul(wf, cols, out=out[b0 : b0 + len(cols)])
    return out.reshape(n, f, ho, wo)


def _conv_backward(x, w, s, g, need_x=True, need_w=True):
    """Gradients of a valid cross-correlation w.r.t. its input and kernel."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    wt = np.ascontiguousarray(w.reshape(f, -1).T)
    g = np.ascontiguousarray(g).reshape(n, f, ho * wo)
    gx = np.zeros_like(x) if need_x else None
    gw = np.zeros((f, c * kh * kw), dtype=w.dtype) if need_w else None
    step = _chunk(n, ho * wo * c * kh * kw)
    for b0 in range(0, n, step):
        gb = g[b0 : b0 + step]
        nb = len(gb)
        if need_w:
            cols = _im2col(x[b0 : b0 + nb], kh, kw, s, ho, wo)
            for k in range(nb):
                gw += gb[k] @ cols[k].T
        if need_x:
            dcols = np.matmul(wt, gb).reshape(nb, c, kh, kw, ho, wo)
            gxb = gx[b0 : b0 + nb]
            for i in range(kh):
                for j in range(kw):
                    gxb[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
    if need_w:
        gw = gw.reshape(w.shape)
    return gx, gw


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of x [N,C,H,W] with kernel [F,C,kH,kW].

    Output extents follow floor((H + 2p - kH) / s) + 1.
    """
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} for {kernel.shape[0]} filters")
    xp = _pad(x.data, padding)
    wd = kernel.data
    out = _conv_forward(xp, wd, stride)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    need_x = x.requires_grad

    def bw(g):
        gx, gw = _conv_backward(xp, wd, stride, g, need_x=need_x)
        if gx is not None and padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, bw, "conv2d")


def conv_transpose2d(x, kernel, bias=None, stride=1, output_size=None):
    """Transpose of :func:`conv2d` for x [N,Cin,h,w] and kernel [Cin,Cout,kH,kW].

    ``output_size`` picks among the spatial sizes that a stride-s convolution
    maps back onto (h, w); by default the smallest one.
    """
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, _, h, w = x.shape
    _, cout, kh, kw = kernel.shape
    base = ((h - 1) * stride + kh, (w - 1) * stride + kw)
    size = base if output_size is None else tuple(output_size)
    if any(not (b <= t < b + stride) for b, t in zip(base, size)):
        raise DimensionError(f"conv_transpose2d: output size {size} unreachable from {(h, w)}")
    wd = kernel.data
    shell = np.zeros((n, cout) + size, dtype=np.result_type(x.data, wd))
    out, _ = _conv_backward(shell, wd, stride, x.data, need_w=False)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    xd = x.data
    need_x = x.requires_grad

    def bw(g):
        gx = _conv_forward(g, wd, stride) if need_x else None
        _, gw = _conv_backward(g, wd, stride, xd, need_x=False)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, bw, "conv_transpose2d")
