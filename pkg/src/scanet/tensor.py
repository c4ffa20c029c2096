"""Rank-4 tensors with reverse-mode differentiation.

Every tensor is an ``(n, c, h, w)`` float32 array. Operations that see an
input with ``requires_grad`` record a node holding their backward rule; the
nodes reachable from a loss form its tape, which :func:`backward` replays in
reverse recording order.

Two global modes alter how ops behave:

* :func:`float64_mode` keeps data in float64 (used by the finite-difference
  checker so that round-off does not swamp the central differences).
* :func:`fp16_emulation` rounds every op output through IEEE binary16.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "full",
    "conv2d",
    "batch_norm",
    "relu",
    "relu6",
    "sigmoid",
    "bilinear_upsample",
    "add",
    "mul",
    "one_minus",
    "concat_channels",
    "slice_channels",
    "global_avg_pool",
    "fully_connected",
    "sum_all",
    "mean_all",
    "scale",
    "backward",
    "finite_diff_check",
    "cast_f16_roundtrip",
    "float64_mode",
    "fp16_emulation",
    "no_grad",
    "flop_counter",
]

F16_MAX = 65504.0


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.fp16 = False
        self.grad_enabled = True
        self.flops: list[int] | None = None
        self.watch: ActivationStats | None = None


_state = _State()
_seq = itertools.count()


@contextlib.contextmanager
def float64_mode():
    prev = _state.dtype
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def fp16_emulation():
    """Round every op output through binary16 while active."""
    prev = _state.fp16
    _state.fp16 = True
    try:
        yield
    finally:
        _state.fp16 = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def flop_counter():
    """Collect FLOPs of every op executed inside the block.

    Yields a one-element list whose entry is the running total. Convention:
    a multiply-accumulate counts as 2 FLOPs (bias adds are not counted),
    elementwise ops 1 FLOP per output element, batch norm 2 per element,
    bilinear upsampling 8 per output element (4 taps, multiply + add).
    """
    prev = _state.flops
    box = [0]
    _state.flops = box
    try:
        yield box
    finally:
        _state.flops = prev


@dataclass
class ActivationStats:
    ops: int = 0
    nonfinite: int = 0
    max_abs: float = 0.0


@contextlib.contextmanager
def activation_watch():
    """Tally every op output produced inside the block (count, non-finite values, peak magnitude)."""
    prev = _state.watch
    stats = ActivationStats()
    _state.watch = stats
    try:
        yield stats
    finally:
        _state.watch = prev


def _count(n: int) -> None:
    if _state.flops is not None:
        _state.flops[0] += int(n)


@dataclass(eq=False)
class Node:
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """A 4-d array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_state.dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1x1x1 tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=requires_grad)


def cast_f16_roundtrip(t: Tensor | np.ndarray):
    """Round to binary16 (nearest-even) and back, saturating at +-65504.

    Accepts a Tensor (returns a new detached Tensor) or a raw array.
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    with np.errstate(over="ignore"):
        half = arr.astype(np.float16)
    out = half.astype(arr.dtype)
    out = np.where(np.isinf(out) & ~np.isinf(arr), np.copysign(F16_MAX, arr), out)
    if isinstance(t, Tensor):
        return Tensor(out)
    return out


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _state.fp16:
        data = cast_f16_roundtrip(data)
    out = Tensor(data)
    w = _state.watch
    if w is not None:
        finite = np.isfinite(out.data)
        w.ops += 1
        w.nonfinite += int(out.data.size - np.count_nonzero(finite))
        if finite.any():
            w.max_abs = max(w.max_abs, float(np.abs(out.data[finite]).max()))
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_dense(xp: np.ndarray, w: np.ndarray, stride: int, oh: int, ow: int):
    """Single-group convolution on a padded input; returns (out, columns)."""
    n, c = xp.shape[:2]
    o, _, k, _ = w.shape
    # columns ordered (n, oh, ow) x (c, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * k * k)
    out = cols @ w.reshape(o, c * k * k).T
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _col2im(dcols: np.ndarray, xp_shape, k: int, stride: int, oh: int, ow: int):
    n, c, hp, wp = xp_shape
    d = dcols.reshape(n, oh, ow, c, k, k)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return dxp


def _conv_depthwise(xp: np.ndarray, w: np.ndarray, stride: int, oh: int, ow: int):
    k = w.shape[-1]
    out = np.zeros((xp.shape[0], xp.shape[1], oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            sl = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            out += sl * w[:, 0, i, j][None, :, None, None]
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-d cross-correlation; ``weight`` is ``(out_c, in_c/groups, k, k)``.

    ``bias`` is a ``(1, out_c, 1, 1)`` tensor or None.
    """
    n, c, h, w_ = x.shape
    o, cg, k, k2 = weight.shape
    if k != k2 or k < 1:
        raise ShapeError(f"kernel must be square and non-empty, got weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"groups={groups} must divide in_c={c} and out_c={o}")
    if cg * groups != c:
        raise ShapeError(f"input {x.shape} does not match weight {weight.shape} with groups={groups}")
    if bias is not None and bias.shape != (1, o, 1, 1):
        raise ShapeError(f"bias {bias.shape} does not match weight {weight.shape}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w_ + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {x.shape} too small for weight {weight.shape}")

    xp = _pad(x.data, padding)
    wd = weight.data
    depthwise = groups == c and cg == 1 and o == c
    if depthwise:
        out = _conv_depthwise(xp, wd, stride, oh, ow)
        cols = None
    elif groups == 1:
        out, cols = _conv_dense(xp, wd, stride, oh, ow)
    else:
        og = o // groups
        parts, cols = [], []
        for g in range(groups):
            part, col = _conv_dense(
                xp[:, g * cg : (g + 1) * cg], wd[g * og : (g + 1) * og], stride, oh, ow
            )
            parts.append(part)
            cols.append(col)
        out = np.concatenate(parts, axis=1)
    if bias is not None:
        out = out + bias.data
    _count(2 * n * o * oh * ow * cg * k * k)

    def bw(g: np.ndarray):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
        if depthwise:
            if weight.requires_grad:
                gw = np.zeros_like(wd)
                for i in range(k):
                    for j in range(k):
                        sl = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                        gw[:, 0, i, j] = (g * sl).sum(axis=(0, 2, 3))
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                            g * wd[:, 0, i, j][None, :, None, None]
                        )
                gx = gxp
        else:
            og = o // groups
            gws, gxps = [], np.zeros_like(xp) if x.requires_grad else None
            for gi in range(groups):
                col = cols if groups == 1 else cols[gi]
                gmat = g[:, gi * og : (gi + 1) * og].transpose(0, 2, 3, 1).reshape(-1, og)
                wmat = wd[gi * og : (gi + 1) * og].reshape(og, -1)
                if weight.requires_grad:
                    gws.append((gmat.T @ col).reshape(og, cg, k, k))
                if x.requires_grad:
                    dcol = gmat @ wmat
                    sub_shape = (n, cg) + xp.shape[2:]
                    gxps[:, gi * cg : (gi + 1) * cg] += _col2im(dcol, sub_shape, k, stride, oh, ow)
            if weight.requires_grad:
                gw = np.concatenate(gws, axis=0)
            gx = gxps
        if gx is not None and padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, bw)


# ---------------------------------------------------------------------------
# normalization and activations


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    ``gamma``, ``beta`` and the running buffers are ``(1, c, 1, 1)``. In
    training mode the running buffers are updated in place with
    ``new = (1 - momentum) * old + momentum * batch_stat`` (unbiased
    variance, as is customary).
    """
    n, c, h, w = x.shape
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (1, c, 1, 1):
            raise ShapeError(f"{name} {t.shape} does not match input {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    if training:
        m = n * h * w
        if m == 0:
            raise ShapeError(f"batch_norm in training mode needs a non-empty batch, got {x.shape}")
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        mean = running_mean.data
        var = running_var.data
        xc = xd - mean
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    _count(2 * x.size)

    def bw(g: np.ndarray):
        gg = (g * xhat).sum(axis=(0, 2, 3), keepdims=True) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = inv * (
                    gxhat
                    - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return _emit(out, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _count(x.size)
    return _emit(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6)
    _count(x.size)
    return _emit(np.clip(x.data, 0, 6), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e))
    # keep the open interval (0, 1) after rounding
    fi = np.finfo(out.dtype)
    out = np.clip(out, fi.tiny, 1 - fi.epsneg)
    _count(x.size)
    return _emit(out, (x,), lambda g: (g * out * (1 - out),))


# ---------------------------------------------------------------------------
# resampling


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    a = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1 - lam)
    np.add.at(a, (rows, i1), lam)
    return a


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling with half-pixel centers (align-corners off)."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _emit(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    ah = _interp_matrix(h, factor, x.data.dtype)
    aw = _interp_matrix(w, factor, x.data.dtype)
    out = ah @ x.data @ aw.T
    _count(8 * out.size)
    return _emit(out, (x,), lambda g: (ah.T @ g @ aw,))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    an, ac, ah, aw = a.shape
    if b.shape == (an, 1, ah, aw):
        return
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return g.sum(axis=1, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be single-channel and broadcast over ``a``."""
    _broadcast_check(a, b)
    _count(a.size)
    return _emit(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be single-channel and broadcast over ``a``."""
    _broadcast_check(a, b)
    ad, bd = a.data, b.data
    _count(a.size)
    return _emit(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def one_minus(a: Tensor) -> Tensor:
    _count(a.size)
    return _emit(1 - a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, k: float) -> Tensor:
    _count(a.size)
    return _emit(a.data * k, (a,), lambda g: (g * k,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    an, ac, ah, aw = a.shape
    bn, bc, bh, bw_ = b.shape
    if (an, ah, aw) != (bn, bh, bw_):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit(out, (a, b), lambda g: (g[:, :ac], g[:, ac:]))


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    n, c, h, w = a.shape
    if not 0 <= start <= stop <= c:
        raise ShapeError(f"channel slice [{start}, {stop}) out of range for {a.shape}")

    def bw(g):
        full_g = np.zeros_like(a.data)
        full_g[:, start:stop] = g
        return (full_g,)

    return _emit(a.data[:, start:stop].copy(), (a,), bw)


# ---------------------------------------------------------------------------
# pooling, dense, reductions


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    hw = h * w
    _count(x.size)
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _emit(out, (x,), lambda g: (np.broadcast_to(g / hw, x.shape).copy(),))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on a ``(n, c, 1, 1)`` input; weight is ``(1, 1, out, c)``."""
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"fully_connected needs a 1x1 spatial input, got {x.shape}")
    o = weight.shape[2]
    if weight.shape != (1, 1, o, c):
        raise ShapeError(f"weight {weight.shape} does not match input {x.shape}")
    if bias.shape != (1, o, 1, 1):
        raise ShapeError(f"bias {bias.shape} does not match weight {weight.shape}")
    xm = x.data.reshape(n, c)
    wm = weight.data.reshape(o, c)
    out = (xm @ wm.T).reshape(n, o, 1, 1) + bias.data
    _count(2 * n * o * c)

    def bw(g):
        gm = g.reshape(n, o)
        return (
            (gm @ wm).reshape(n, c, 1, 1),
            (gm.T @ xm).reshape(1, 1, o, c),
            gm.sum(axis=0).reshape(1, o, 1, 1),
        )

    return _emit(out, (x, weight, bias), bw)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=x.data.dtype).reshape(1, 1, 1, 1)
    return _emit(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    k = x.size
    out = (x.data.sum(dtype=x.data.dtype) / k).reshape(1, 1, 1, 1)
    return _emit(out, (x,), lambda g: (np.full(x.shape, g.reshape(()) / k, dtype=x.data.dtype),))


# ---------------------------------------------------------------------------
# backward pass


@dataclass
class Tape:
    """Nodes reachable from a loss, in recording order."""

    nodes: list[Tensor]

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        return cls(found)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Gradients accumulate across calls; callers reset them with ``zero_grad``.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a 1x1x1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_loss(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                gi = gi.astype(inp.data.dtype, copy=False)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                k = id(inp)
                pending[k] = gi if k not in pending else pending[k] + gi


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-3) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``fn`` maps the input tensors to a scalar tensor. The check runs in
    float64; inputs are copied so the caller's tensors are left untouched.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    with float64_mode():
        xs = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
        backward(fn(*xs))
        analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]
        worst = 0.0
        with no_grad():
            for x, ga in zip(xs, analytic):
                flat = x.data.reshape(-1)
                gflat = ga.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = fn(*xs).item()
                    flat[i] = orig - step
                    fm = fn(*xs).item()
                    flat[i] = orig
                    num = (fp - fm) / (2 * step)
                    a = gflat[i]
                    err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                    worst = max(worst, err)
    return worst
