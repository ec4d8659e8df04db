"""Reverse-mode automatic differentiation over dense float64 tensors.

Every trainable computation in the engine runs through the ops in this
module.  A forward call records one entry on the active tape; `backward`
replays the tape in reverse, accumulating (never overwriting) gradients
into every reachable tensor with ``requires_grad``.

Broadcasting scheme (the single place it is defined): shapes are aligned
from the trailing dimension; each aligned pair of sizes must be equal or
one of them must be 1, and an operand may have fewer dimensions (missing
leading dimensions act as size-1 batch dimensions).  This covers
trailing-singleton expansion ([C, 1] against [C, T]) and leading batch
dimensions ([C, T] against [Bt, C, T]).  Anything else raises ShapeError.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from .errors import EngineError, ShapeError


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # A few operators for readability; everything routes through forward_op.
    def __add__(self, other):
        return forward_op("add", self, as_tensor(other))

    def __radd__(self, other):
        return forward_op("add", as_tensor(other), self)

    def __sub__(self, other):
        return forward_op("sub", self, as_tensor(other))

    def __rsub__(self, other):
        return forward_op("sub", as_tensor(other), self)

    def __mul__(self, other):
        return forward_op("mul", self, as_tensor(other))

    def __rmul__(self, other):
        return forward_op("mul", as_tensor(other), self)

    def __neg__(self):
        return forward_op("mul", self, as_tensor(-1.0))


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Record:
    """One recorded op: kind, input references, and its backward rule."""

    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Execution-ordered op records; reverse replay drives backprop.

    Records are appended in forward execution order, so an op's inputs
    always precede it (topological order holds by construction).
    """

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_TAPE = Tape()
_RECORDING = True


def tape() -> Tape:
    return _TAPE


@contextmanager
def no_grad():
    """Suspend tape recording; forward values are still computed."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


def _record(kind, inputs, output, backward_fn) -> None:
    if _RECORDING and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _TAPE.records.append(Record(kind, inputs, output, backward_fn))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.shape)
    if t.grad is None:
        # own the buffer: g may alias another tensor's grad or a view
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _check_broadcast(shape_a, shape_b, kind) -> None:
    for da, db in zip(reversed(shape_a), reversed(shape_b)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{kind}: shapes {tuple(shape_a)} and {tuple(shape_b)} "
                             "do not broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "add")
    out = Tensor(a.data + b.data)

    def backward():
        g = out.grad
        _accumulate(a, g)
        _accumulate(b, g)

    _record("add", (a, b), out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "sub")
    out = Tensor(a.data - b.data)

    def backward():
        g = out.grad
        _accumulate(a, g)
        _accumulate(b, -g)

    _record("sub", (a, b), out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "mul")
    out = Tensor(a.data * b.data)

    def backward():
        g = out.grad
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    _record("mul", (a, b), out, backward)
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = Tensor(a.data ** p)

    def backward():
        _accumulate(a, out.grad * p * a.data ** (p - 1.0))

    _record("power", (a,), out, backward)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def backward():
        _accumulate(a, out.grad / a.data)

    _record("log", (a,), out, backward)
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def backward():
        _accumulate(a, out.grad * out.data)

    _record("exp", (a,), out, backward)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def backward():
        _accumulate(a, out.grad * (a.data > 0.0))

    _record("relu", (a,), out, backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(expit(a.data))

    def backward():
        _accumulate(a, out.grad * out.data * (1.0 - out.data))

    _record("sigmoid", (a,), out, backward)
    return out


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    _check_broadcast(a.shape, slope.shape, "prelu")
    neg = a.data < 0.0
    out = Tensor(np.where(neg, slope.data * a.data, a.data))

    def backward():
        g = out.grad
        _accumulate(a, g * np.where(neg, slope.data, 1.0))
        _accumulate(slope, g * np.where(neg, a.data, 0.0))

    _record("prelu", (a, slope), out, backward)
    return out


def _norm_axis(axis, ndim, kind):
    if axis is None:
        return None
    axis = int(axis)
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{kind}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim, "mean")
    out = Tensor(a.data.mean(axis=ax, keepdims=keepdims))
    count = a.data.size if ax is None else a.shape[ax]

    def backward():
        g = out.grad
        if not keepdims and ax is not None:
            g = np.expand_dims(g, ax)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    _record("mean", (a,), out, backward)
    return out


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim, "sum")
    out = Tensor(a.data.sum(axis=ax, keepdims=keepdims))

    def backward():
        g = out.grad
        if not keepdims and ax is not None:
            g = np.expand_dims(g, ax)
        _accumulate(a, np.broadcast_to(g, a.shape))

    _record("sum", (a,), out, backward)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, a.ndim, "softmax")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=ax, keepdims=True))

    def backward():
        g = out.grad
        s = out.data
        _accumulate(a, s * (g - (g * s).sum(axis=ax, keepdims=True)))

    _record("softmax", (a,), out, backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ax = _norm_axis(axis, tensors[0].ndim, "concat")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    sizes = [t.shape[ax] for t in tensors]

    def backward():
        g = out.grad
        offset = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(offset, offset + size)
            _accumulate(t, g[tuple(sl)])
            offset += size

    _record("concat", tuple(tensors), out, backward)
    return out


def tensor_slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _norm_axis(axis, a.ndim, "slice")
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(a.data[sl].copy())

    def backward():
        g = np.zeros(a.shape, dtype=np.float64)
        g[sl] = out.grad
        _accumulate(a, g)

    _record("slice", (a,), out, backward)
    return out


# ---------------------------------------------------------------------------
# Linear algebra and convolutions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, trans_a: bool = False, trans_b: bool = False) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got "
                         f"{a.shape} and {b.shape}")
    am = a.data.swapaxes(-1, -2) if trans_a else a.data
    bm = b.data.swapaxes(-1, -2) if trans_b else b.data
    if am.shape[-1] != bm.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} "
                         f"(trans_a={trans_a}, trans_b={trans_b}) do not match")
    _check_broadcast(am.shape[:-2], bm.shape[:-2], "matmul")
    out = Tensor(am @ bm)

    def backward():
        g = out.grad
        da = g @ bm.swapaxes(-1, -2)
        db = am.swapaxes(-1, -2) @ g
        if trans_a:
            da = da.swapaxes(-1, -2)
        if trans_b:
            db = db.swapaxes(-1, -2)
        _accumulate(a, da)
        _accumulate(b, db)

    _record("matmul", (a, b), out, backward)
    return out


def _conv_windows(xp: np.ndarray, k: int, t_out: int, stride: int, dilation: int):
    """Strided view [batch, C, K, T_out] over a padded input [batch, C, Tp]."""
    sb, sc, st = xp.strides
    return as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], k, t_out),
        strides=(sb, sc, st * dilation, st * stride),
        writeable=False,
    )


def conv1d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1,
           groups: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) along the last axis.

    x: [C_in, T] or [batch, C_in, T]; w: [C_out, C_in/groups, K].
    """
    if w.ndim != 3:
        raise ShapeError(f"conv1d: weight must be [C_out, C_in/groups, K], got {w.shape}")
    if x.ndim not in (2, 3):
        raise ShapeError(f"conv1d: input must be 2-D or 3-D, got {x.shape}")
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    bt, c_in, t = xd.shape
    c_out, c_in_g, k = w.shape
    if c_in != c_in_g * groups or c_out % groups:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight "
                         f"{w.shape} at groups={groups}")
    t_out = (t + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: input length {t} too short for kernel {k} "
                         f"(dilation {dilation}, pad {pad})")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    span = (t_out - 1) * stride + 1

    depthwise = groups == c_in and c_in_g == 1 and c_out == c_in
    if depthwise:
        out_data = np.zeros((bt, c_out, t_out), dtype=np.float64)
        for j in range(k):
            seg = xp[:, :, j * dilation: j * dilation + span: stride]
            out_data += w.data[:, 0, j][:, None] * seg
        cols = None
    elif groups == 1:
        cols = np.ascontiguousarray(
            _conv_windows(xp, k, t_out, stride, dilation)).reshape(bt, c_in * k, t_out)
        out_data = w.data.reshape(c_out, c_in * k) @ cols
    else:
        out_data = np.zeros((bt, c_out, t_out), dtype=np.float64)
        cols = []
        cg_out = c_out // groups
        for gi in range(groups):
            xg = xp[:, gi * c_in_g:(gi + 1) * c_in_g]
            cg = np.ascontiguousarray(
                _conv_windows(xg, k, t_out, stride, dilation)).reshape(bt, c_in_g * k, t_out)
            cols.append(cg)
            wg = w.data[gi * cg_out:(gi + 1) * cg_out].reshape(cg_out, c_in_g * k)
            out_data[:, gi * cg_out:(gi + 1) * cg_out] = wg @ cg

    out = Tensor(out_data if batched else out_data[0])

    def backward():
        g = out.grad if batched else out.grad[None]
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dw = np.zeros_like(w.data) if w.requires_grad else None

        if depthwise:
            for j in range(k):
                sl = slice(j * dilation, j * dilation + span, stride)
                if dw is not None:
                    dw[:, 0, j] = (g * xp[:, :, sl]).sum(axis=(0, 2))
                if dxp is not None:
                    dxp[:, :, sl] += w.data[:, 0, j][:, None] * g
        elif groups == 1:
            if dw is not None:
                dw[...] = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0) \
                    .reshape(c_out, c_in_g, k)
            if dxp is not None:
                for j in range(k):
                    sl = slice(j * dilation, j * dilation + span, stride)
                    dxp[:, :, sl] += np.matmul(w.data[:, :, j].T, g)
        else:
            cg_out = c_out // groups
            for gi in range(groups):
                gg = g[:, gi * cg_out:(gi + 1) * cg_out]
                if dw is not None:
                    dw[gi * cg_out:(gi + 1) * cg_out] = np.matmul(
                        gg, cols[gi].transpose(0, 2, 1)).sum(axis=0) \
                        .reshape(cg_out, c_in_g, k)
                if dxp is not None:
                    wg = w.data[gi * cg_out:(gi + 1) * cg_out]
                    for j in range(k):
                        sl = slice(j * dilation, j * dilation + span, stride)
                        dxp[:, gi * c_in_g:(gi + 1) * c_in_g, sl] += \
                            np.matmul(wg[:, :, j].T, gg)

        if w.requires_grad:
            _accumulate(w, dw)
        if x.requires_grad:
            dx = dxp[:, :, pad: pad + t] if pad else dxp
            _accumulate(x, dx if batched else dx[0])

    _record("conv1d", (x, w), out, backward)
    return out


def conv1d_transpose(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Transposed 1-D convolution (overlap-add). w: [C_in, C_out, K]."""
    if w.ndim != 3:
        raise ShapeError(f"conv1d_transpose: weight must be [C_in, C_out, K], got {w.shape}")
    if x.ndim not in (2, 3):
        raise ShapeError(f"conv1d_transpose: input must be 2-D or 3-D, got {x.shape}")
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    bt, c_in, t = xd.shape
    w_in, c_out, k = w.shape
    if c_in != w_in:
        raise ShapeError(f"conv1d_transpose: input {x.shape} vs weight {w.shape}")
    t_out = (t - 1) * stride + k
    span = (t - 1) * stride + 1
    out_data = np.zeros((bt, c_out, t_out), dtype=np.float64)
    for j in range(k):
        out_data[:, :, j: j + span: stride] += np.matmul(w.data[:, :, j].T, xd)
    out = Tensor(out_data if batched else out_data[0])

    def backward():
        g = out.grad if batched else out.grad[None]
        if x.requires_grad:
            dx = np.zeros_like(xd)
            for j in range(k):
                dx += np.matmul(w.data[:, :, j], g[:, :, j: j + span: stride])
            _accumulate(x, dx if batched else dx[0])
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for j in range(k):
                gs = g[:, :, j: j + span: stride]
                dw[:, :, j] = np.matmul(xd, gs.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, dw)

    _record("conv1d_transpose", (x, w), out, backward)
    return out


def layer_norm_global(x: Tensor, gain: Tensor, bias: Tensor,
                      eps: float = 1e-8) -> Tensor:
    """Normalize over channel and time jointly; per-channel gain/bias.

    x: [C, T] or [batch, C, T]; gain/bias: [C, 1].
    """
    if x.ndim not in (2, 3):
        raise ShapeError(f"layer_norm_global: input must be 2-D or 3-D, got {x.shape}")
    c = x.shape[-2]
    if gain.shape != (c, 1) or bias.shape != (c, 1):
        raise ShapeError(f"layer_norm_global: gain/bias must be [{c}, 1], got "
                         f"{gain.shape} and {bias.shape}")
    axes = (-2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(gain.data * xhat + bias.data)

    def backward():
        g = out.grad
        _accumulate(gain, g * xhat)
        _accumulate(bias, g)
        if x.requires_grad:
            gx = g * gain.data
            dx = inv_std * (gx - gx.mean(axis=axes, keepdims=True)
                            - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
            _accumulate(x, dx)

    _record("layer_norm_global", (x, gain, bias), out, backward)
    return out


# ---------------------------------------------------------------------------
# Dispatch, backward, gradient checking
# ---------------------------------------------------------------------------

_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv1d": conv1d,
    "conv1d_transpose": conv1d_transpose,
    "prelu": prelu,
    "sigmoid": sigmoid,
    "relu": relu,
    "mean": mean,
    "sum": tensor_sum,
    "power": power,
    "log": log,
    "exp": exp,
    "concat": concat,
    "slice": tensor_slice,
    "layer_norm_global": layer_norm_global,
    "softmax": softmax,
}


def forward_op(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Apply the op `kind` to `inputs`, recording it on the active tape."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise EngineError(f"unknown op kind: {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


def op_kinds() -> tuple[str, ...]:
    return tuple(_OPS)


def backward(loss: Tensor) -> None:
    """Populate grads of every reachable requires_grad tensor from `loss`."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not _TAPE.records:
        raise EngineError("backward: tape is empty")
    loss.grad = np.ones(loss.shape, dtype=np.float64)
    for rec in reversed(_TAPE.records):
        if rec.output.grad is not None:
            rec.backward()


def check_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient at x and central
    finite differences with step h.

    The denominator is guarded: |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8), so a constant f reports exactly 0.
    """
    if h <= 0:
        raise EngineError("check_gradient: h must be positive")
    global _TAPE
    saved_tape, saved_grad, saved_rg = _TAPE, x.grad, x.requires_grad
    _TAPE = Tape()
    x.requires_grad = True
    x.grad = None
    try:
        y = f(x)
        if y.data.size != 1:
            raise ShapeError(f"check_gradient: f must be scalar-valued, got {y.shape}")
        if _TAPE.records:
            backward(y)
        analytic = (x.grad if x.grad is not None
                    else np.zeros(x.shape, dtype=np.float64)).copy()
    finally:
        _TAPE = saved_tape
        x.grad = saved_grad
        x.requires_grad = saved_rg

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(f(x).data.reshape(-1)[0])
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
