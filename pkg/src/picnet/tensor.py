"""Dense binary64 tensors with reverse-mode differentiation.

Every operation here is shape-strict: there is no implicit broadcasting, so a
mismatch anywhere in the model surfaces as a :class:`ShapeError` at the op
that caused it.  Each op records its parents and a backward rule on the
output tensor; :func:`backward` replays those rules in reverse topological
order (the "tape").
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, NumericError, ShapeError, UsageError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, optimizer)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, name or "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return Tensor._from_op(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return Tensor._from_op(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [B,M,K] x [B,K,N] -> [B,M,N]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return Tensor._from_op(ad @ bd, (a, b), back, "bmm")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b, with b added to every row."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot map {x.shape} with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    return Tensor._from_op(xd @ wd + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)), "linear")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    axis = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: extents disagree off axis {axis}: {ref} vs {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back, "concat")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every axis after the first two: [B,C,...] -> [B,C]."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs [B,C,...], got {x.shape}")
    shape = x.shape
    n = math.prod(shape[2:])
    axes = tuple(range(2, x.ndim))

    def back(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)) / n, shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=axes), (x,), back, "global_avg_pool")


def expand_spatial(g: Tensor, h: int, w: int) -> Tensor:
    """Explicitly replicate a [B,C] gate over an h x w grid."""
    if g.ndim != 2:
        raise ShapeError(f"expand_spatial needs [B,C], got {g.shape}")
    out = np.broadcast_to(g.data[:, :, None, None], g.shape + (h, w)).copy()
    return Tensor._from_op(out, (g,), lambda gr: (gr.sum(axis=(2, 3)),), "expand_spatial")


# ---------------------------------------------------------------------------
# convolutions (cross-correlation, zero padding)
# ---------------------------------------------------------------------------


def _conv_geometry(x: Tensor, w: Tensor, nd: int, stride: int, pad: int, op: str):
    if stride < 1 or pad < 0:
        raise ConfigError(f"{op}: stride must be >= 1 and pad >= 0 (got stride={stride}, pad={pad})")
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ShapeError(f"{op}: expected {nd + 2}-D input and kernel, got {x.shape} and {w.shape}")
    spatial, ks = x.shape[2:], w.shape[2:]
    for s, k in zip(spatial, ks):
        if k > s + 2 * pad:
            raise ShapeError(f"{op}: kernel {ks} larger than padded input {spatial} (pad={pad})")
    out_sp = tuple((s + 2 * pad - k) // stride + 1 for s, k in zip(spatial, ks))
    return ks, out_sp


def _window(offset, out_sp, stride):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_sp)
    )


def _pad(xd: np.ndarray, pad: int, nd: int) -> np.ndarray:
    if pad == 0:
        return xd
    return np.pad(xd, [(0, 0), (0, 0)] + [(pad, pad)] * nd)


def _unpad(xp: np.ndarray, pad: int, nd: int) -> np.ndarray:
    if pad == 0:
        return xp
    return xp[(slice(None), slice(None)) + (slice(pad, -pad),) * nd]


def _im2col(xp: np.ndarray, ks, out_sp, stride: int, nd: int) -> np.ndarray:
    """Rows are output positions (b, *out); columns are (cin, *kernel)."""
    win = sliding_window_view(xp, ks, axis=tuple(range(2, nd + 2)))
    win = win[(slice(None), slice(None)) + tuple(slice(0, stride * (n - 1) + 1, stride) for n in out_sp)]
    # [B, Cin, *out, *ks] -> [B, *out, Cin, *ks]
    order = (0,) + tuple(range(2, nd + 2)) + (1,) + tuple(range(nd + 2, 2 * nd + 2))
    return win.transpose(order).reshape(xp.shape[0] * math.prod(out_sp), -1)


def _conv_nd(x: Tensor, w: Tensor, b: Tensor | None, stride: int, pad: int, nd: int, op: str) -> Tensor:
    ks, out_sp = _conv_geometry(x, w, nd, stride, pad, op)
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"{op}: kernel expects {w.shape[1]} input channels, input has {x.shape[1]}")
    cout, cin = w.shape[:2]
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"{op}: bias shape {b.shape} does not match {cout} output channels")
    bsz = x.shape[0]
    xp = _pad(x.data, pad, nd)
    cols = _im2col(xp, ks, out_sp, stride, nd)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(np.moveaxis(out.reshape((bsz,) + out_sp + (cout,)), -1, 1))

    def back(g):
        gmat = np.moveaxis(g, 1, -1).reshape(-1, cout)
        dw = (gmat.T @ cols).reshape(w.shape)
        dcols = (gmat @ wmat).reshape((bsz,) + out_sp + (cin,) + ks)
        # [B, *out, Cin, *ks] -> [B, Cin, *ks, *out] so each offset slice is contiguous
        order = (0, nd + 1) + tuple(range(nd + 2, 2 * nd + 2)) + tuple(range(1, nd + 1))
        dcols = np.ascontiguousarray(dcols.transpose(order))
        dxp = np.zeros_like(xp)
        for off in np.ndindex(*ks):
            dxp[_window(off, out_sp, stride)] += dcols[(slice(None), slice(None)) + off]
        grads = [_unpad(dxp, pad, nd), dw]
        if b is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, back, op)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    return _conv_nd(x, w, b, stride, pad, 2, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    return _conv_nd(x, w, b, stride, pad, 3, "conv3d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """One kernel per channel, no channel mixing. w has shape [C,1,kh,kw]."""
    ks, out_sp = _conv_geometry(x, w, 2, stride, pad, "depthwise_conv2d")
    c = x.shape[1]
    if w.shape[:2] != (c, 1):
        raise ShapeError(f"depthwise_conv2d: kernel {w.shape} needs leading dims ({c}, 1)")
    xp = _pad(x.data, pad, 2)
    wd = w.data
    offsets = list(np.ndindex(*ks))
    out = np.zeros((x.shape[0], c) + out_sp)
    for off in offsets:
        out += xp[_window(off, out_sp, stride)] * wd[(slice(None), 0) + off][None, :, None, None]

    def back(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wd)
        for off in offsets:
            win = _window(off, out_sp, stride)
            dw[(slice(None), 0) + off] = (g * xp[win]).sum(axis=(0, 2, 3))
            dxp[win] += g * wd[(slice(None), 0) + off][None, :, None, None]
        return _unpad(dxp, pad, 2), dw

    return Tensor._from_op(out, (x, w), back, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _pool_extent(n: int, kernel: int, stride: int, pad: int) -> int:
    out = -(-(n + 2 * pad - kernel) // stride) + 1
    # the last window must start inside the input or left padding
    if (out - 1) * stride >= n + pad:
        out -= 1
    return max(out, 1)


def avg_pool2d(x: Tensor, kernel: int = 2, stride: int = 2, pad: int = 0) -> Tensor:
    """Ceil-mode average pooling; each window averages only in-bounds elements.

    With the default kernel 2 / stride 2 / pad 0 the output is
    (ceil(H/2), ceil(W/2)) and constant inputs stay exactly constant.
    """
    if kernel < 1 or stride < 1:
        raise ConfigError(f"avg_pool2d: kernel and stride must be >= 1 (got {kernel}, {stride})")
    if pad < 0 or pad >= kernel:
        raise ConfigError(f"avg_pool2d: pad must lie in [0, kernel), got {pad}")
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects [B,C,H,W], got {x.shape}")
    _, _, h, w = x.shape
    oh, ow = _pool_extent(h, kernel, stride, pad), _pool_extent(w, kernel, stride, pad)
    th, tw = (oh - 1) * stride + kernel, (ow - 1) * stride + kernel
    xp = np.zeros(x.shape[:2] + (th, tw))
    xp[:, :, pad:pad + h, pad:pad + w] = x.data
    mask = np.zeros((th, tw))
    mask[pad:pad + h, pad:pad + w] = 1.0
    total = np.zeros(x.shape[:2] + (oh, ow))
    count = np.zeros((oh, ow))
    for i in range(kernel):
        # row-wise partial sums first: exact for constants when kernel == 2
        row = np.zeros_like(total)
        for j in range(kernel):
            win = (slice(None), slice(None), slice(i, i + stride * (oh - 1) + 1, stride), slice(j, j + stride * (ow - 1) + 1, stride))
            row += xp[win]
            count += mask[win[2:]]
        total += row
    out = total / count

    def back(g):
        gs = g / count
        dxp = np.zeros_like(xp)
        for i, j in itertools.product(range(kernel), range(kernel)):
            dxp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += gs
        return (dxp[:, :, pad:pad + h, pad:pad + w].copy(),)

    return Tensor._from_op(out, (x,), back, "avg_pool2d")


def _lerp_plan(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), i1), frac)
    return i0, i1, frac, mat


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centres (align_corners=False)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects [B,C,h,w], got {x.shape}")
    _, _, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target ({out_h}, {out_w}) smaller than source ({h}, {w})")
    r0, r1, rf, mh = _lerp_plan(h, out_h)
    c0, c1, cf, mw = _lerp_plan(w, out_w)
    xd = x.data
    # x0 + f*(x1 - x0) keeps constant inputs exactly constant
    a, bb = xd[:, :, r0, :], xd[:, :, r1, :]
    y = a + rf[:, None] * (bb - a)
    a, bb = y[:, :, :, c0], y[:, :, :, c1]
    out = a + cf * (bb - a)

    def back(g):
        return (mh.T @ g @ mw,)

    return Tensor._from_op(out, (x,), back, "bilinear_upsample")


# ---------------------------------------------------------------------------
# normalisation and losses
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects [M,N], got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(s, (x,), back, "softmax_rows")


def frobenius_norm(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("frobenius_norm of an empty tensor")
    xd = x.data
    n = float(np.sqrt((xd * xd).sum()))

    def back(g):
        if n == 0.0:
            return (np.zeros_like(xd),)
        return (float(g) * xd / n,)

    return Tensor._from_op(np.array(n), (x,), back, "frobenius_norm")


def sample_norms(x: Tensor) -> Tensor:
    """Frobenius norm of each leading-axis slice: [B,...] -> [B]."""
    if x.ndim < 2:
        raise ShapeError(f"sample_norms expects [B,...], got {x.shape}")
    xd = x.data.reshape(x.shape[0], -1)
    n = np.sqrt((xd * xd).sum(axis=1))
    shape = x.shape

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        coef = np.where(n > 0, g / safe, 0.0)
        return ((xd * coef[:, None]).reshape(shape),)

    return Tensor._from_op(n, (x,), back, "sample_norms")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of logsumexp(logits) - logits[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B,K] logits, got {logits.shape}")
    bsz, k = logits.shape
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != bsz:
        raise ShapeError(f"cross_entropy: {lab.shape[0]} labels for batch of {bsz}")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise DataError(f"cross_entropy: labels must lie in [0, {k}), got range [{lab.min()}, {lab.max()}]")
    logp = log_softmax_np(logits.data)
    rows = np.arange(bsz)
    loss = -logp[rows, lab].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, lab] -= 1.0
        return (d * (float(g) / bsz),)

    return Tensor._from_op(np.array(loss), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into any existing ``grad`` arrays, so callers zero
    them between steps (``adam_step`` does this for parameters).
    """
    if loss.size != 1 or loss.ndim > 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward: loss is not connected to any tensor requiring grad")
    tape = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update over ``params``; zeroes grads afterwards."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise UsageError(f"adam_step: no gradient for {', '.join(missing)}")
    for k, p in params.items():
        if not np.isfinite(p.grad).all():
            raise NumericError(f"adam_step: non-finite gradient for {k}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, p in params.items():
        g = p.grad
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
