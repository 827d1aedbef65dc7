"""Dense 3x3 convolution math on planar ``(C, H, W)`` tensors.

Every op also accepts a leading batch axis ``(N, C, H, W)``. Arithmetic is
carried out in float64; results are cast back to the promoted dtype of the
operands, so float32 storage stays float32 and float64 inputs stay exact.

Gradients are explicit per-op rules (see :func:`backward`); the filter
network is a fixed chain, so no general autodiff graph is needed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

__all__ = [
    "BorderMode",
    "Context",
    "StandardKernel",
    "DepthwiseKernel",
    "PointwiseKernel",
    "OpRecord",
    "Grads",
    "as_tensor",
    "pad_border",
    "conv2d_standard",
    "conv2d_depthwise",
    "conv2d_pointwise",
    "relu",
    "batch_norm",
    "backward",
]

KSIZE = 3


class BorderMode(enum.Enum):
    """How samples outside the block are filled before a 3x3 convolution."""

    ZERO = "zero"  # "same padding": zeros outside the block
    CONTEXT = "context"  # "valid padding": reconstructed samples around the block

    @classmethod
    def parse(cls, value: Union[str, "BorderMode"]) -> "BorderMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown border mode {value!r}") from None


@dataclass(frozen=True)
class Context:
    """Surrounding samples for ContextFill.

    ``frame`` has the same channel count as the block (and the same batch
    axis, if any); the block sits at ``frame[..., top:top+H, left:left+W]``.
    """

    frame: np.ndarray
    top: int
    left: int


@dataclass(frozen=True)
class StandardKernel:
    weight: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        w, b = np.asarray(self.weight), np.asarray(self.bias)
        if w.ndim != 4 or w.shape[2:] != (KSIZE, KSIZE):
            raise ValueError(f"standard kernel must be (O, C, 3, 3), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class DepthwiseKernel:
    # No bias: it folds into the following pointwise bias.
    weight: np.ndarray  # (ch, 3, 3)

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 3 or w.shape[1:] != (KSIZE, KSIZE):
            raise ValueError(f"depthwise kernel must be (C, 3, 3), got {w.shape}")
        object.__setattr__(self, "weight", w)

    @property
    def in_ch(self) -> int:
        return self.weight.shape[0]

    out_ch = in_ch


@dataclass(frozen=True)
class PointwiseKernel:
    weight: np.ndarray  # (out_ch, in_ch)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        w, b = np.asarray(self.weight), np.asarray(self.bias)
        if w.ndim != 2:
            raise ValueError(f"pointwise kernel must be (O, C), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]


Kernel = Union[StandardKernel, DepthwiseKernel, PointwiseKernel]


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate a ``(C, H, W)`` or ``(N, C, H, W)`` array of finite reals."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim not in (3, 4):
        raise ValueError(f"tensor must be (C, H, W) or (N, C, H, W), got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def _out_dtype(*arrays) -> np.dtype:
    dt = np.result_type(*arrays)
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float64)


def _check_channels(x: np.ndarray, kernel: Kernel) -> None:
    if x.shape[-3] != kernel.in_ch:
        raise ValueError(
            f"channel mismatch: input has {x.shape[-3]} channels, kernel expects {kernel.in_ch}"
        )


def pad_border(
    x: np.ndarray,
    mode: BorderMode = BorderMode.ZERO,
    context: Optional[Context] = None,
    margin: int = 1,
) -> np.ndarray:
    """Return ``x`` (as float64) extended by ``margin`` samples on each side."""
    mode = BorderMode.parse(mode)
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if mode is BorderMode.ZERO:
        widths = [(0, 0)] * (x.ndim - 2) + [(margin, margin), (margin, margin)]
        return np.pad(x, widths)
    if context is None:
        raise ValueError("ContextFill requires a context frame")
    frame = np.asarray(context.frame, dtype=np.float64)
    if frame.shape[:-2] != x.shape[:-2]:
        raise ValueError(
            f"context leading shape {frame.shape[:-2]} does not match block {x.shape[:-2]}"
        )
    top, left = context.top - margin, context.left - margin
    bottom, right = context.top + h + margin, context.left + w + margin
    if top < 0 or left < 0 or bottom > frame.shape[-2] or right > frame.shape[-1]:
        raise ValueError(
            f"context {frame.shape[-2:]} does not contain the block at "
            f"({context.top}, {context.left}) with a {margin}-sample margin"
        )
    out = frame[..., top:bottom, left:right].copy()
    out[..., margin:margin + h, margin:margin + w] = x
    return out


def _shifted(xp: np.ndarray, h: int, w: int):
    for dy in range(KSIZE):
        for dx in range(KSIZE):
            yield dy, dx, xp[..., dy:dy + h, dx:dx + w]


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # (..., C, H+2, W+2) -> (..., C*9, H*W), tap order matches weight[:, :, dy, dx]
    cols = np.stack([s for _, _, s in _shifted(xp, h, w)], axis=-3)
    return cols.reshape(*cols.shape[:-4], cols.shape[-4] * KSIZE * KSIZE, h * w)


def conv2d_standard(
    x,
    kernel: StandardKernel,
    mode: BorderMode = BorderMode.ZERO,
    context: Optional[Context] = None,
) -> np.ndarray:
    x = as_tensor(x)
    _check_channels(x, kernel)
    h, w = x.shape[-2:]
    cols = _im2col(pad_border(x, mode, context), h, w)
    wmat = kernel.weight.astype(np.float64).reshape(kernel.out_ch, -1)
    out = np.matmul(wmat, cols) + kernel.bias.astype(np.float64)[:, None]
    out = out.reshape(*x.shape[:-3], kernel.out_ch, h, w)
    return out.astype(_out_dtype(x, kernel.weight, kernel.bias), copy=False)


def conv2d_depthwise(
    x,
    kernel: DepthwiseKernel,
    mode: BorderMode = BorderMode.ZERO,
    context: Optional[Context] = None,
) -> np.ndarray:
    x = as_tensor(x)
    _check_channels(x, kernel)
    h, w = x.shape[-2:]
    xp = pad_border(x, mode, context)
    wk = kernel.weight.astype(np.float64)
    out = np.zeros(x.shape, dtype=np.float64)
    for dy, dx, s in _shifted(xp, h, w):
        out += wk[:, dy, dx, None, None] * s
    return out.astype(_out_dtype(x, kernel.weight), copy=False)


def conv2d_pointwise(x, kernel: PointwiseKernel) -> np.ndarray:
    x = as_tensor(x)
    _check_channels(x, kernel)
    h, w = x.shape[-2:]
    flat = np.asarray(x, dtype=np.float64).reshape(*x.shape[:-2], h * w)
    out = np.matmul(kernel.weight.astype(np.float64), flat)
    out += kernel.bias.astype(np.float64)[:, None]
    out = out.reshape(*x.shape[:-3], kernel.out_ch, h, w)
    return out.astype(_out_dtype(x, kernel.weight, kernel.bias), copy=False)


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0).astype(_out_dtype(x), copy=False)


def _stat_axes(x: np.ndarray) -> tuple:
    return tuple(i for i in range(x.ndim) if i != x.ndim - 3)


def _bcast(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)[:, None, None]


def batch_norm(
    x,
    gamma,
    beta,
    mean=None,
    var=None,
    eps: float = 1e-3,
    training: bool = False,
):
    """Per-channel batch normalization.

    In training mode the statistics come from ``x`` itself (over every axis
    but the channel axis) and ``(out, batch_mean, batch_var)`` is returned;
    otherwise the supplied running ``mean``/``var`` are used and only the
    output is returned.
    """
    x = as_tensor(x)
    xd = x.astype(np.float64)
    if training:
        axes = _stat_axes(x)
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
    inv_std = 1.0 / np.sqrt(np.asarray(var, np.float64) + eps)
    out = _bcast(gamma * inv_std) * (xd - _bcast(mean)) + _bcast(beta)
    out = out.astype(_out_dtype(x, gamma, beta), copy=False)
    if training:
        return out, mean, var
    return out


# --------------------------------------------------------------------------
# gradients


@dataclass(frozen=True)
class OpRecord:
    """What a backward rule needs from the forward call.

    ``op`` is one of ``standard``, ``depthwise``, ``pointwise``, ``relu``,
    ``bn_train`` or ``bn_eval``. For batch norm, ``params`` holds
    ``(gamma, beta, mean, var, eps)``; in training mode mean/var are the
    batch statistics.
    """

    op: str
    x: np.ndarray
    kernel: Optional[Kernel] = None
    mode: BorderMode = BorderMode.ZERO
    context: Optional[Context] = None
    params: Optional[tuple] = None


@dataclass
class Grads:
    x: np.ndarray
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None


def _reduce_batch(g: np.ndarray, ndim_single: int) -> np.ndarray:
    while g.ndim > ndim_single:
        g = g.sum(axis=0)
    return g


def _standard_backward(rec: OpRecord, g: np.ndarray) -> Grads:
    x, k = rec.x, rec.kernel
    h, w = x.shape[-2:]
    xp = pad_border(x, rec.mode, rec.context)
    cols = _im2col(xp, h, w)  # (..., C9, HW)
    gflat = g.reshape(*g.shape[:-2], h * w)  # (..., O, HW)
    batch_axes = list(range(gflat.ndim - 2))
    gw = np.tensordot(gflat, cols, axes=(batch_axes + [gflat.ndim - 1], batch_axes + [cols.ndim - 1]))
    gb = _reduce_batch(gflat.sum(axis=-1), 1)
    wmat = k.weight.astype(np.float64).reshape(k.out_ch, -1)
    gcols = np.matmul(wmat.T, gflat).reshape(*x.shape[:-3], k.in_ch, KSIZE * KSIZE, h, w)
    gxp = np.zeros(xp.shape, dtype=np.float64)
    for t, (dy, dx, _) in enumerate(_shifted(xp, h, w)):
        gxp[..., dy:dy + h, dx:dx + w] += gcols[..., t, :, :]
    # context samples are constants; only the block interior receives gradient
    return Grads(gxp[..., 1:-1, 1:-1], gw.reshape(k.weight.shape), gb)


def _depthwise_backward(rec: OpRecord, g: np.ndarray) -> Grads:
    x, k = rec.x, rec.kernel
    h, w = x.shape[-2:]
    xp = pad_border(x, rec.mode, rec.context)
    wk = k.weight.astype(np.float64)
    gw = np.zeros(wk.shape, dtype=np.float64)
    gxp = np.zeros(xp.shape, dtype=np.float64)
    spec = "nchw,nchw->c" if g.ndim == 4 else "chw,chw->c"
    for dy, dx, s in _shifted(xp, h, w):
        gw[:, dy, dx] = np.einsum(spec, g, s)
        gxp[..., dy:dy + h, dx:dx + w] += wk[:, dy, dx, None, None] * g
    return Grads(gxp[..., 1:-1, 1:-1], gw)


def _pointwise_backward(rec: OpRecord, g: np.ndarray) -> Grads:
    x, k = rec.x, rec.kernel
    h, w = x.shape[-2:]
    xf = np.asarray(x, np.float64).reshape(*x.shape[:-2], h * w)
    gf = g.reshape(*g.shape[:-2], h * w)
    batch_axes = list(range(gf.ndim - 2))
    gw = np.tensordot(gf, xf, axes=(batch_axes + [gf.ndim - 1], batch_axes + [xf.ndim - 1]))
    gb = _reduce_batch(gf.sum(axis=-1), 1)
    gx = np.matmul(k.weight.astype(np.float64).T, gf).reshape(x.shape)
    return Grads(gx, gw, gb)


def _bn_backward(rec: OpRecord, g: np.ndarray, training: bool) -> Grads:
    gamma, beta, mean, var, eps = rec.params
    x = np.asarray(rec.x, np.float64)
    axes = _stat_axes(x)
    inv_std = 1.0 / np.sqrt(np.asarray(var, np.float64) + eps)
    xhat = (x - _bcast(mean)) * _bcast(inv_std)
    ggamma = (g * xhat).sum(axis=axes)
    gbeta = g.sum(axis=axes)
    gxhat = g * _bcast(gamma)
    if not training:
        return Grads(gxhat * _bcast(inv_std), ggamma, gbeta)
    m = x.size / x.shape[-3]
    gx = _bcast(inv_std / m) * (
        m * gxhat
        - _bcast(gxhat.sum(axis=axes))
        - xhat * _bcast((gxhat * xhat).sum(axis=axes))
    )
    return Grads(gx, ggamma, gbeta)


def backward(record: Optional[OpRecord], grad) -> Grads:
    """Gradients of a recorded op w.r.t. its input and parameters.

    For batch norm ``Grads.weight``/``Grads.bias`` carry the gamma/beta
    gradients.
    """
    if record is None:
        raise ValueError("backward needs the forward record")
    g = np.asarray(grad, dtype=np.float64)
    if g.shape[:-3] != record.x.shape[:-3] or g.shape[-2:] != record.x.shape[-2:]:
        raise ValueError(f"upstream gradient {g.shape} does not match input {record.x.shape}")
    if record.op == "standard":
        return _standard_backward(record, g)
    if record.op == "depthwise":
        return _depthwise_backward(record, g)
    if record.op == "pointwise":
        return _pointwise_backward(record, g)
    if record.op == "relu":
        return Grads(g * (np.asarray(record.x) > 0))
    if record.op in ("bn_train", "bn_eval"):
        return _bn_backward(record, g, record.op == "bn_train")
    raise ValueError(f"unknown op {record.op!r}")
