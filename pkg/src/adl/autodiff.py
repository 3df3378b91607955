"""Small n-dimensional tensor with reverse-mode differentiation.

Tensors wrap a numpy array laid out as ``[batch, channel, spatial...]``.
Every op records its parents and a closure that maps the output gradient
to parent gradients; :func:`backward` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "conv_nd",
    "conv_output_size",
    "filter_axis",
    "upsample_nearest",
    "avg_pool",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "mul_scalar",
    "abs_",
    "logcosh",
    "concat_channels",
    "reduce_mean",
    "reduce_sum",
    "finite_diff_check",
    "sequential",
    "PAD_MODES",
]

PAD_MODES = ("same", "zeros", "valid")

_node_ids = itertools.count()


class GraphConsumedError(RuntimeError):
    pass


class Tensor:
    """An array that optionally participates in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None or not isinstance(data, np.ndarray) else data
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = next(_node_ids) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else _add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else _add_scalar(self, -other)

    def __rsub__(self, other):
        return _add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_node_ids)
        out.op = op
        out._parents = parents
        out._backward = grad_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf.

    Returns a map ``node_id -> gradient`` over those leaves. The graph is
    released afterwards; a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
                result[node.node_id] = node.grad
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True
    return result


@contextlib.contextmanager
def sequential():
    """Force single-threaded BLAS so repeated runs are bit-identical."""
    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------- padding


def _pad_index(n: int, lo: int, hi: int) -> np.ndarray:
    return np.pad(np.arange(n), (lo, hi), mode="symmetric")


def _mirror_pad(x: np.ndarray, pads: Sequence[tuple[int, int]], axes: Sequence[int]) -> np.ndarray:
    for (lo, hi), ax in zip(pads, axes):
        if lo or hi:
            x = np.take(x, _pad_index(x.shape[ax], lo, hi), axis=ax)
    return x


def _mirror_pad_adjoint(g: np.ndarray, pads: Sequence[tuple[int, int]], axes: Sequence[int], sizes: Sequence[int]) -> np.ndarray:
    for (lo, hi), ax, n in reversed(list(zip(pads, axes, sizes))):
        if not (lo or hi):
            continue
        idx = _pad_index(n, lo, hi)
        core = [slice(None)] * g.ndim
        core[ax] = slice(lo, lo + n)
        out = g[tuple(core)].copy()
        for p in itertools.chain(range(lo), range(lo + n, lo + n + hi)):
            dst = [slice(None)] * g.ndim
            src = [slice(None)] * g.ndim
            dst[ax] = idx[p]
            src[ax] = p
            out[tuple(dst)] += g[tuple(src)]
        g = out
    return g


def _zero_pad(x: np.ndarray, pads, axes) -> np.ndarray:
    width = [(0, 0)] * x.ndim
    for pad, ax in zip(pads, axes):
        width[ax] = pad
    return np.pad(x, width)


def _zero_pad_adjoint(g: np.ndarray, pads, axes, sizes) -> np.ndarray:
    sl = [slice(None)] * g.ndim
    for (lo, _), ax, n in zip(pads, axes, sizes):
        sl[ax] = slice(lo, lo + n)
    return g[tuple(sl)]


def _same_pads(kernel: Sequence[int], dilation: int) -> list[tuple[int, int]]:
    pads = []
    for k in kernel:
        total = dilation * (k - 1)
        pads.append((total // 2, total - total // 2))
    return pads


def conv_output_size(n: int, k: int, stride: int, dilation: int, pad_total: int) -> int:
    return (n + pad_total - dilation * (k - 1) - 1) // stride + 1


# ------------------------------------------------------------ convolution


def conv_nd(x: Tensor, kernel: Tensor, stride: int = 1, dilation: int = 1, padding: str = "same") -> Tensor:
    """Bias-free N-d cross-correlation.

    ``x`` is ``[N, Cin, *S]`` and ``kernel`` is ``[Cout, Cin, *k]``. With
    ``padding="same"`` the input is mirror (symmetric) padded by
    ``dilation*(k-1)`` split low/high, so stride 1 keeps the spatial size.
    """
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    if padding not in PAD_MODES:
        raise ValueError(f"unknown padding {padding!r}")
    xd, wd = x.data, kernel.data
    rank = xd.ndim - 2
    if rank < 1 or wd.ndim != rank + 2:
        raise ValueError(f"kernel rank {wd.ndim - 2} does not match input rank {rank}")
    n, cin = xd.shape[:2]
    cout = wd.shape[0]
    if wd.shape[1] != cin:
        raise ValueError(f"kernel expects {wd.shape[1]} input channels, input has {cin}")
    ksize = wd.shape[2:]
    spatial = xd.shape[2:]
    axes = list(range(2, 2 + rank))
    if padding == "valid":
        pads = [(0, 0)] * rank
        xp = xd
    else:
        pads = _same_pads(ksize, dilation)
        xp = _mirror_pad(xd, pads, axes) if padding == "same" else _zero_pad(xd, pads, axes)
    padded = xp.shape[2:]
    out_sp = tuple(conv_output_size(s, k, stride, dilation, lo + hi) for s, k, (lo, hi) in zip(spatial, ksize, pads))
    if any(o < 1 for o in out_sp):
        raise ValueError(f"zero-sized output for input {spatial}, kernel {ksize}, dilation {dilation}")

    offsets = list(np.ndindex(*ksize))
    nk = len(offsets)
    slices = [
        tuple(slice(o * dilation, o * dilation + stride * (m - 1) + 1, stride) for o, m in zip(off, out_sp))
        for off in offsets
    ]
    xpt = xp.transpose(1, 0, *axes)
    cols = np.empty((cin, nk, n) + out_sp, dtype=xd.dtype)
    for i, sl in enumerate(slices):
        cols[:, i] = xpt[(slice(None), slice(None)) + sl]
    cols2 = cols.reshape(cin * nk, -1)
    w2 = wd.reshape(cout, cin * nk)
    out = (w2 @ cols2).reshape((cout, n) + out_sp)
    out = np.ascontiguousarray(out.transpose(1, 0, *axes))

    def grad_fn(g):
        gt = g.transpose(1, 0, *axes).reshape(cout, -1)
        gw = (gt @ cols2.T).reshape(wd.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ gt).reshape((cin, nk, n) + out_sp)
            dxp = np.zeros((cin, n) + padded, dtype=xd.dtype)
            for i, sl in enumerate(slices):
                dxp[(slice(None), slice(None)) + sl] += dcols[:, i]
            dxp = dxp.transpose(1, 0, *axes)
            if padding == "same":
                gx = _mirror_pad_adjoint(dxp, pads, axes, spatial)
            elif padding == "zeros":
                gx = _zero_pad_adjoint(dxp, pads, axes, spatial)
            else:
                gx = dxp
            gx = np.ascontiguousarray(gx)
        return gx, gw

    return _make(out, (x, kernel), grad_fn, "conv_nd")


def filter_axis(x: Tensor, taps: np.ndarray, axis: int, dilation: int = 1) -> Tensor:
    """Correlate every line along ``axis`` with fixed 1-d ``taps`` (mirror padded, same size)."""
    taps = np.asarray(taps, dtype=x.data.dtype)
    k = taps.shape[0]
    axis = axis % x.ndim
    n = x.shape[axis]
    (lo, hi), = _same_pads([k], dilation)
    xp = _mirror_pad(x.data, [(lo, hi)], [axis])

    def window(arr, i):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(i * dilation, i * dilation + n)
        return tuple(sl)

    out = np.zeros_like(x.data)
    for i, t in enumerate(taps):
        if t != 0:
            out += t * xp[window(xp, i)]

    def grad_fn(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for i, t in enumerate(taps):
            if t != 0:
                gp[window(gp, i)] += t * g
        return (_mirror_pad_adjoint(gp, [(lo, hi)], [axis], [n]),)

    return _make(out, (x,), grad_fn, "filter_axis")


# --------------------------------------------------------------- resampling


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 2:
        raise ValueError("upsampling factor must be >= 2")
    rank = x.ndim - 2
    out = x.data
    for ax in range(2, 2 + rank):
        out = np.repeat(out, factor, axis=ax)
    shape = x.shape

    def grad_fn(g):
        split = list(shape[:2])
        for s in shape[2:]:
            split += [s, factor]
        return (g.reshape(split).sum(axis=tuple(range(3, 3 + 2 * rank, 2))),)

    return _make(out, (x,), grad_fn, "upsample_nearest")


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling; spatial extents must be divisible by ``factor``."""
    if factor == 1:
        return x
    shape = x.shape
    rank = x.ndim - 2
    if any(s % factor for s in shape[2:]):
        raise ValueError(f"spatial extents {shape[2:]} not divisible by {factor}")
    split = list(shape[:2])
    for s in shape[2:]:
        split += [s // factor, factor]
    red = tuple(range(3, 3 + 2 * rank, 2))
    out = x.data.reshape(split).mean(axis=red)
    scale = 1.0 / factor**rank

    def grad_fn(g):
        up = g * scale
        for ax in range(2, 2 + rank):
            up = np.repeat(up, factor, axis=ax)
        return (up,)

    return _make(out, (x,), grad_fn, "avg_pool")


# --------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def mul_scalar(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _make(x.data * alpha, (x,), lambda g: (g * alpha,), "mul_scalar")


def _add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data + c, (x,), lambda g: (g,), "add_scalar")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise ValueError("log of a non-positive value")
    return _make(np.log(d), (x,), lambda g: (g / d,), "log")


_LN2 = math.log(2.0)


def logcosh(x: Tensor) -> Tensor:
    """log(cosh(x)) without overflow or cancellation.

    Large |x| uses |x| + log1p(exp(-2|x|)) - log 2; small |x| uses
    log1p(2 sinh(x/2)^2), which keeps full relative precision near 0.
    """
    d = x.data
    a = np.abs(d)
    big = a + np.log1p(np.exp(-2 * a)) - _LN2
    small = np.log1p(2 * np.sinh(0.5 * np.minimum(a, 1.0)) ** 2)
    out = np.where(a < 1.0, small, big)
    return _make(out.astype(d.dtype, copy=False), (x,), lambda g: (g * np.tanh(d),), "logcosh")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("nothing to concatenate")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[:1] != ref[:1] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: non-channel extents differ {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def grad_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _make(out, tuple(xs), grad_fn, "concat_channels")


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes)
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _make(np.asarray(out), (x,), grad_fn, "reduce_sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul_scalar(reduce_sum(x, axes), 1.0 / count)


# ------------------------------------------------------------- gradient check


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-4) -> float:
    """Max over elements of |analytic - central difference| / (|central difference| + 1e-8)."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    backward(f(probe))
    analytic = probe.grad
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def parameters_finite_diff_check(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-4, max_per_param: int | None = None, rng=None
) -> float:
    """Finite-difference check of a scalar loss w.r.t. existing parameter tensors (perturbed in place)."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(analytic.reshape(-1)[i] - num) / (abs(num) + 1e-8))
    return worst
