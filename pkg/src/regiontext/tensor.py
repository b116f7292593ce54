"""Dense fp64 tensors with taped reverse-mode differentiation.

Every learned quantity in the pipeline lives in a :class:`Tensor`: a dense
row-major float64 array plus an optional gradient slot.  Executing a
primitive on tensors that require gradients records a closure on a
thread-local tape; :func:`backward` replays the tape once, in reverse
execution order, and then clears it.  Forward results are checked for
NaN/Inf by default (overflow is an error, never a silent value); the check
can be switched off with :func:`set_finite_checks` for tight loops.

Independent tapes live on independent threads.  A single tape is strictly
single-threaded.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, NumericError

Array = np.ndarray

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_state = threading.local()
_finite_checks = True


def _tape() -> list:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = []
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def reset_tape() -> None:
    """Drop any recorded-but-unreplayed nodes on this thread's tape."""
    _state.tape = []


def tape_length() -> int:
    return len(_tape())


class no_grad:
    """Context manager: primitives executed inside are not recorded."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf checking of op results; returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def _ensure_finite(arr: Array, kind: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NumericError(f"{kind}: non-finite values in result")


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _ensure_finite(arr, "tensor")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    # operator sugar used throughout the layer code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: Array, requires: bool, kind: str) -> Tensor:
    _ensure_finite(data, kind)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = requires and _grad_enabled()
    return out


def _push(out: Tensor, bwd: Callable[[Array], None]) -> None:
    if out.requires_grad:
        _tape().append((out, bwd))


def _accum(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _scatter_rows(shape: tuple[int, ...], ids: Array, rows: Array) -> Array:
    """Sum `rows` into a zero array of `shape` at row indices `ids`.

    Equivalent to np.add.at(out, ids, rows) but much faster: rows are
    sorted by id and segment-summed with add.reduceat.
    """
    out = np.zeros(shape)
    if ids.size == 0:
        return out
    order = np.argsort(ids, kind="stable")
    ids_sorted = ids[order]
    rows_sorted = rows[order]
    starts = np.flatnonzero(np.r_[True, ids_sorted[1:] != ids_sorted[:-1]])
    out[ids_sorted[starts]] = np.add.reduceat(rows_sorted, starts, axis=0)
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad tensor feeding `loss`.

    `loss` must be a scalar produced by taped primitives.  Visits each
    recorded node exactly once, in reverse execution order, then clears the
    tape.
    """
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise ContractError(
            f"backward: loss must be a scalar tensor, got shape "
            f"{getattr(loss, 'shape', type(loss))}"
        )
    tape = _tape()
    try:
        loss.grad = np.ones((), dtype=np.float64)
        for out, bwd in reversed(tape):
            g = out.grad
            if g is None:
                continue
            bwd(g)
    finally:
        _state.tape = []


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data + b.data, a.requires_grad or b.requires_grad, "add")

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    _push(out, bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data - b.data, a.requires_grad or b.requires_grad, "sub")

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    _push(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data * b.data, a.requires_grad or b.requires_grad, "mul")

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    _push(out, bwd)
    return out


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    out = _result(x.data * c, x.requires_grad, "scale")

    def bwd(g: Array) -> None:
        _accum(x, g * c)

    _push(out, bwd)
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking semantics (ndim >= 2 on both sides)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError(
            f"matmul: operands must have ndim >= 2, got {a.shape} @ {b.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ContractError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, a.requires_grad or b.requires_grad, "matmul")

    def bwd(g: Array) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    _push(out, bwd)
    return out


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    perm = tuple(axes) if axes is not None else tuple(reversed(range(x.data.ndim)))
    if sorted(perm) != list(range(x.data.ndim)):
        raise ContractError(f"transpose: axes {perm} invalid for shape {x.shape}")
    out = _result(np.ascontiguousarray(np.transpose(x.data, perm)), x.requires_grad, "transpose")
    inv = tuple(np.argsort(perm))

    def bwd(g: Array) -> None:
        _accum(x, np.transpose(g, inv))

    _push(out, bwd)
    return out


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ContractError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    out = _result(data, x.requires_grad, "reshape")

    def bwd(g: Array) -> None:
        _accum(x, g.reshape(x.data.shape))

    _push(out, bwd)
    return out


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("concat: empty input list")
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ContractError(
            f"concat: incompatible shapes {[x.shape for x in xs]} along axis {axis}"
        ) from None
    out = _result(data, any(x.requires_grad for x in xs), "concat")
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: Array) -> None:
        for x, start, stop in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                _accum(x, g[tuple(idx)])

    _push(out, bwd)
    return out


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    x = as_tensor(x)
    dim = x.data.shape[axis]
    if start < 0 or length < 0 or start + length > dim:
        raise ContractError(f"narrow: [{start}:{start + length}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _result(np.ascontiguousarray(x.data[idx]), x.requires_grad, "narrow")

    def bwd(g: Array) -> None:
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    _push(out, bwd)
    return out


def softmax(x) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, x.requires_grad, "softmax")

    def bwd(g: Array) -> None:
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, (g - dot) * y)

    _push(out, bwd)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ContractError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = _result(
        xhat * gain.data + bias.data,
        x.requires_grad or gain.requires_grad or bias.requires_grad,
        "layer_norm",
    )

    def bwd(g: Array) -> None:
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (gh - m1 - xhat * m2) * inv)

    _push(out, bwd)
    return out


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = _result(x.data * cdf, x.requires_grad, "gelu")

    def bwd(g: Array) -> None:
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, g * (cdf + x.data * pdf))

    _push(out, bwd)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    out = _result(y, x.requires_grad, "sigmoid")

    def bwd(g: Array) -> None:
        _accum(x, g * y * (1.0 - y))

    _push(out, bwd)
    return out


def absval(x) -> Tensor:
    x = as_tensor(x)
    out = _result(np.abs(x.data), x.requires_grad, "abs")

    def bwd(g: Array) -> None:
        _accum(x, g * np.sign(x.data))

    _push(out, bwd)
    return out


def embedding(table, ids) -> Tensor:
    """Row lookup: table[V, D] indexed by an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if table.data.ndim != 2:
        raise ContractError(f"embedding: table must be 2-d, got {table.shape}")
    v = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding: id out of range [0, {v})")
    out = _result(table.data[ids], table.requires_grad, "embedding")

    def bwd(g: Array) -> None:
        flat_ids = ids.reshape(-1)
        rows = g.reshape(-1, table.data.shape[1])
        _accum(table, _scatter_rows(table.data.shape, flat_ids, rows))

    _push(out, bwd)
    return out


def tsum(x) -> Tensor:
    x = as_tensor(x)
    out = _result(np.asarray(x.data.sum()), x.requires_grad, "sum")

    def bwd(g: Array) -> None:
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    _push(out, bwd)
    return out


def tmean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = _result(np.asarray(x.data.mean()), x.requires_grad, "mean")

    def bwd(g: Array) -> None:
        _accum(x, np.broadcast_to(g / n, x.data.shape).copy())

    _push(out, bwd)
    return out


def avg_pool2(x) -> Tensor:
    """Stride-2 average downsample over the last two axes (sides even)."""
    x = as_tensor(x)
    *lead, h, w = _spatial(x, "avg_pool2")
    if h % 2 or w % 2:
        raise ContractError(f"avg_pool2: spatial sides must be even, got {x.shape}")
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    nd = blocks.ndim
    out = _result(blocks.mean(axis=(nd - 3, nd - 1)), x.requires_grad, "avg_pool2")

    def bwd(g: Array) -> None:
        gx = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        _accum(x, gx)

    _push(out, bwd)
    return out


def upsample2(x) -> Tensor:
    """Nearest-neighbor 2x upsample over the last two axes."""
    x = as_tensor(x)
    *lead, h, w = _spatial(x, "upsample2")
    out = _result(
        np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1), x.requires_grad, "upsample2"
    )

    def bwd(g: Array) -> None:
        blocks = g.reshape(*lead, h, 2, w, 2)
        nd = blocks.ndim
        _accum(x, blocks.sum(axis=(nd - 3, nd - 1)))

    _push(out, bwd)
    return out


def _spatial(x: Tensor, kind: str) -> tuple[int, ...]:
    if x.data.ndim < 3:
        raise ContractError(f"{kind}: expected a [..., C, H, W] tensor, got {x.shape}")
    return x.data.shape


def roi_align(feat, boxes: Array, out_side: int, stride: float) -> Tensor:
    """Bilinear crop of image-frame boxes from feature maps.

    Samples an `out_side` x `out_side` grid of regularly spaced sub-pixel
    centers inside each box and maps them into feature coordinates (cell
    centers at index + 0.5); `stride` converts image pixels to feature
    cells.  Two layouts:

      feat [C, H, W]    with boxes [R, 4] (x1, y1, x2, y2)
      feat [B, C, H, W] with boxes [R, 5] (image index, x1, y1, x2, y2)

    Boxes are constants; the result [R, C, out, out] is differentiable in
    `feat`.
    """
    feat = as_tensor(feat)
    boxes = np.asarray(boxes, dtype=np.float64)
    batched = feat.data.ndim == 4
    if feat.data.ndim not in (3, 4):
        raise ContractError(f"roi_align: feature map must be 3-d or 4-d, got {feat.shape}")
    want = 5 if batched else 4
    if boxes.ndim != 2 or boxes.shape[1] != want:
        raise ContractError(
            f"roi_align: boxes must be [R, {want}] for a {feat.data.ndim}-d map, got {boxes.shape}"
        )
    if out_side < 1:
        raise ContractError(f"roi_align: out_side must be >= 1, got {out_side}")
    fm = feat.data if batched else feat.data[None]
    b, c, h, w = fm.shape
    if batched:
        bidx = boxes[:, 0].astype(np.intp)
        if bidx.size and (bidx.min() < 0 or bidx.max() >= b):
            raise ContractError(f"roi_align: image index out of range [0, {b})")
        boxes = boxes[:, 1:]
    else:
        bidx = np.zeros(len(boxes), dtype=np.intp)
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ContractError("roi_align: degenerate box (x2 <= x1 or y2 <= y1)")

    r = boxes.shape[0]
    steps = (np.arange(out_side) + 0.5) / out_side
    xs = boxes[:, 0:1] + steps[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])
    ys = boxes[:, 1:2] + steps[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    fx = xs / stride - 0.5
    fy = ys / stride - 0.5
    x0 = np.floor(fx).astype(np.intp)
    y0 = np.floor(fy).astype(np.intp)
    wx = fx - x0
    wy = fy - y0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)

    shape = (r, out_side, out_side)
    gb = np.broadcast_to(bidx[:, None, None], shape)
    gy0 = np.broadcast_to(y0c[:, :, None], shape)
    gy1 = np.broadcast_to(y1c[:, :, None], shape)
    gx0 = np.broadcast_to(x0c[:, None, :], shape)
    gx1 = np.broadcast_to(x1c[:, None, :], shape)
    wyg = wy[:, :, None]
    wxg = wx[:, None, :]
    weights = (
        ((1 - wyg) * (1 - wxg), gy0, gx0),
        ((1 - wyg) * wxg, gy0, gx1),
        (wyg * (1 - wxg), gy1, gx0),
        (wyg * wxg, gy1, gx1),
    )
    # gather as [R*o*o, C] rows from the flattened [B*H*W, C] grid
    grid = np.ascontiguousarray(fm.transpose(0, 2, 3, 1)).reshape(b * h * w, c)
    corner_ids = [
        ((gb * h + gy) * w + gx).reshape(-1) for _, gy, gx in weights
    ]
    val = np.zeros((r * out_side * out_side, c))
    for (wgt, _, _), ids in zip(weights, corner_ids):
        val += grid[ids] * wgt.reshape(-1, 1)
    out_data = val.reshape(r, out_side, out_side, c).transpose(0, 3, 1, 2)
    out = _result(np.ascontiguousarray(out_data), feat.requires_grad, "roi_align")

    def bwd(g: Array) -> None:
        rows = g.transpose(0, 2, 3, 1).reshape(-1, c)  # [R*o*o, C]
        all_ids = np.concatenate(corner_ids)
        all_rows = np.concatenate(
            [rows * wgt.reshape(-1, 1) for wgt, _, _ in weights], axis=0
        )
        flat = _scatter_rows((b * h * w, c), all_ids, all_rows)
        gf = flat.reshape(b, h, w, c).transpose(0, 3, 1, 2)
        _accum(feat, gf if batched else gf[0])

    _push(out, bwd)
    return out


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: quadratic inside |d| < beta, linear outside."""
    pred, target = as_tensor(pred), as_tensor(target)
    d = pred.data - target.data
    ad = np.abs(d)
    val = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = _result(val, pred.requires_grad or target.requires_grad, "smooth_l1")

    def bwd(g: Array) -> None:
        dd = np.where(ad < beta, d / beta, np.sign(d)) * g
        if pred.requires_grad:
            _accum(pred, _unbroadcast(dd, pred.data.shape))
        if target.requires_grad:
            _accum(target, _unbroadcast(-dd, target.data.shape))

    _push(out, bwd)
    return out


def _log_softmax(z: Array) -> Array:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def sequence_cross_entropy(logits, targets, epsilon: float = 0.0) -> Tensor:
    """Per-position label-smoothed cross-entropy.

    logits [..., V], integer targets [...]; returns losses of shape [...].
    The smoothed target puts 1 - eps + eps/V on the true class and eps/V on
    every other class.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    v = logits.data.shape[-1]
    if v < 2:
        raise ContractError(f"cross_entropy: vocabulary size must be >= 2, got {v}")
    if not 0.0 <= epsilon < 1.0:
        raise ContractError(f"cross_entropy: epsilon must be in [0, 1), got {epsilon}")
    if targets.shape != logits.data.shape[:-1]:
        raise ContractError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target out of range [0, {v})")

    logp = _log_softmax(logits.data)
    tgt_logp = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    mean_logp = logp.mean(axis=-1)
    losses = -(1.0 - epsilon) * tgt_logp - epsilon * mean_logp
    out = _result(losses, logits.requires_grad, "cross_entropy")

    def bwd(g: Array) -> None:
        p = np.exp(logp)
        q = np.full_like(p, epsilon / v)
        np.put_along_axis(
            q, targets[..., None], epsilon / v + (1.0 - epsilon), axis=-1
        )
        _accum(logits, (p - q) * g[..., None])

    _push(out, bwd)
    return out


def cross_entropy_label_smoothed(logits, target: int, epsilon: float) -> Tensor:
    """Label-smoothed cross-entropy of a single [V] logit vector (scalar loss)."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1:
        raise ContractError(f"cross_entropy: expected a [V] vector, got {logits.shape}")
    losses = sequence_cross_entropy(
        reshape(logits, (1, logits.data.shape[0])), np.asarray([target]), epsilon
    )
    return reshape(losses, ())


def focal_heatmap_loss(logits, target, n_pos: int, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss for center heatmaps.

    `target` is a Gaussian-splatted map in [0, 1] with exact 1.0 at object
    centers; `logits` are pre-sigmoid scores of the same shape.  The summed
    loss is normalized by max(1, n_pos).
    """
    logits = as_tensor(logits)
    y = np.asarray(target, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ContractError(
            f"focal_heatmap: target {y.shape} does not match logits {logits.shape}"
        )
    z = logits.data
    p = expit(z)
    # stable log-probabilities: log p = -softplus(-z), log(1-p) = -softplus(z)
    log_p = -np.logaddexp(0.0, -z)
    log_1p = -np.logaddexp(0.0, z)
    pos = y >= 1.0
    norm = max(1, int(n_pos))
    w_neg = np.power(1.0 - y, beta)
    pos_term = -np.power(1.0 - p, alpha) * log_p
    neg_term = -w_neg * np.power(p, alpha) * log_1p
    total = np.where(pos, pos_term, neg_term).sum() / norm
    out = _result(np.asarray(total), logits.requires_grad, "focal_heatmap")

    def bwd(g: Array) -> None:
        gpos = alpha * p * np.power(1.0 - p, alpha) * log_p - np.power(1.0 - p, alpha + 1.0)
        gneg = w_neg * (np.power(p, alpha + 1.0) - alpha * np.power(p, alpha) * (1.0 - p) * log_1p)
        dz = np.where(pos, gpos, gneg) / norm
        _accum(logits, dz * g)

    _push(out, bwd)
    return out


# Registry of differentiable primitives; the gradient-check battery walks it.
PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "narrow": narrow,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "abs": absval,
    "embedding": embedding,
    "sum": tsum,
    "mean": tmean,
    "avg_pool2": avg_pool2,
    "upsample2": upsample2,
    "roi_align": roi_align,
    "smooth_l1": smooth_l1,
    "cross_entropy": sequence_cross_entropy,
    "focal_heatmap": focal_heatmap_loss,
}


def apply_primitive(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch a primitive by name; unknown kinds are contract violations."""
    fn = PRIMITIVES.get(kind)
    if fn is None:
        raise ContractError(f"unknown primitive kind '{kind}'")
    return fn(*args, **kwargs)
