"""Teacher/student filter networks, BN folding and complexity accounting.

Architecture: ``K`` depthwise-separable (DSC) layers with ``F`` feature maps
(first layer 1 -> F), each ``depthwise 3x3 -> pointwise 1x1 -> [BN] -> ReLU``,
then one standard 3x3 convolution F -> 1 without activation. The network
predicts a residual that is added to its input (global skip).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    BorderMode,
    Context,
    DepthwiseKernel,
    PointwiseKernel,
    StandardKernel,
    as_tensor,
    batch_norm,
    conv2d_depthwise,
    conv2d_pointwise,
    conv2d_standard,
    relu,
)

BN_EPS = 1e-3
BN_MOMENTUM = 0.9
# Final conv starts near zero so the untrained network is close to identity
# (the global skip) instead of adding unit-scale noise to the input.
RESIDUAL_INIT_SCALE = 1e-2


@dataclass(frozen=True)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        n = np.shape(self.gamma)
        for name in ("beta", "mean", "var"):
            if np.shape(getattr(self, name)) != n:
                raise ValueError(f"BN {name} shape {np.shape(getattr(self, name))} != {n}")
        if np.any(np.asarray(self.var, np.float64) + self.eps <= 0):
            raise ValueError("BN var + eps must be positive")

    @property
    def channels(self) -> int:
        return len(self.gamma)

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, eps: float = BN_EPS) -> "BNParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            mean=np.zeros(channels, dtype),
            var=np.ones(channels, dtype),
            eps=eps,
        )


@dataclass(frozen=True)
class DscLayer:
    depthwise: DepthwiseKernel
    pointwise: PointwiseKernel
    bn: Optional[BNParams] = None

    def __post_init__(self):
        if self.depthwise.in_ch != self.pointwise.in_ch:
            raise ValueError("depthwise channels must equal pointwise input channels")
        if self.bn is not None and self.bn.channels != self.pointwise.out_ch:
            raise ValueError("BN channel count must equal pointwise output channels")


@dataclass(frozen=True)
class NetworkConfig:
    num_dsc_layers: int = 9
    feature_maps: int = 32
    with_bn: bool = True

    def __post_init__(self):
        if self.num_dsc_layers < 1 or self.feature_maps < 1:
            raise ValueError("num_dsc_layers and feature_maps must be >= 1")


STUDENT = NetworkConfig(9, 32, True)
TEACHER = NetworkConfig(24, 64, True)


@dataclass(frozen=True)
class Model:
    layers: Tuple[DscLayer, ...]
    final: StandardKernel
    config: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) != self.config.num_dsc_layers:
            raise ValueError(f"expected {self.config.num_dsc_layers} DSC layers, got {len(self.layers)}")
        if self.layers[0].depthwise.in_ch != 1:
            raise ValueError("first DSC layer must take a single channel")
        if self.final.out_ch != 1:
            raise ValueError("final convolution must have one output channel")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.pointwise.out_ch != nxt.depthwise.in_ch:
                raise ValueError("DSC layer channel counts do not chain")
        if self.layers[-1].pointwise.out_ch != self.final.in_ch:
            raise ValueError("final convolution input channels do not match")

    @property
    def folded(self) -> bool:
        return all(layer.bn is None for layer in self.layers)

    @property
    def dtype(self) -> np.dtype:
        return self.final.weight.dtype


# --------------------------------------------------------------------------
# construction


def build_model(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Zero-mean normal initialization; zero biases; identity BN statistics.

    Every convolution is drawn with std ``sqrt(1 / (3 * fan_in))``. This is
    narrower than He scaling; at small batch sizes it trains noticeably more
    reliably. The final convolution gets an extra ``RESIDUAL_INIT_SCALE`` so
    the untrained network starts close to the identity mapping.
    """
    rng = np.random.default_rng(seed)
    f = config.feature_maps

    def normal(shape, fan_in, scale=1.0):
        return (rng.standard_normal(shape) * scale * np.sqrt(1.0 / (3 * fan_in))).astype(dtype)

    layers = []
    c_in = 1
    for _ in range(config.num_dsc_layers):
        dw = DepthwiseKernel(normal((c_in, 3, 3), 9))
        pw = PointwiseKernel(normal((f, c_in), c_in), np.zeros(f, dtype))
        bn = BNParams.identity(f, dtype) if config.with_bn else None
        layers.append(DscLayer(dw, pw, bn))
        c_in = f
    final = StandardKernel(
        normal((1, f, 3, 3), 9 * f, RESIDUAL_INIT_SCALE), np.zeros(1, dtype)
    )
    return Model(tuple(layers), final, config)


def build_student(seed: int = 0, dtype=np.float32) -> Model:
    return build_model(STUDENT, seed, dtype)


def build_teacher(seed: int = 0, dtype=np.float32) -> Model:
    return build_model(TEACHER, seed, dtype)


def cast_model(model: Model, dtype) -> Model:
    """Copy of ``model`` with every array stored as ``dtype``."""

    def c(a):
        return np.asarray(a).astype(dtype)

    layers = []
    for layer in model.layers:
        bn = layer.bn
        if bn is not None:
            bn = BNParams(c(bn.gamma), c(bn.beta), c(bn.mean), c(bn.var), bn.eps)
        layers.append(
            DscLayer(
                DepthwiseKernel(c(layer.depthwise.weight)),
                PointwiseKernel(c(layer.pointwise.weight), c(layer.pointwise.bias)),
                bn,
            )
        )
    final = StandardKernel(c(model.final.weight), c(model.final.bias))
    return Model(tuple(layers), final, model.config)


# --------------------------------------------------------------------------
# inference


def dsc_layer_forward(layer: DscLayer, x: np.ndarray) -> np.ndarray:
    """One DSC layer in inference mode (running BN statistics)."""
    y = conv2d_pointwise(conv2d_depthwise(x, layer.depthwise), layer.pointwise)
    if layer.bn is not None:
        bn = layer.bn
        y = batch_norm(y, bn.gamma, bn.beta, bn.mean, bn.var, bn.eps)
    return relu(y)


def _residual_branch(model: Model, x: np.ndarray, keep: Sequence[int] = ()):
    feats = []
    for i, layer in enumerate(model.layers):
        x = dsc_layer_forward(layer, x)
        if i in keep:
            feats.append(x)
    return conv2d_standard(x, model.final), feats


def _check_single_channel(rec: np.ndarray) -> None:
    if rec.shape[-3] != 1:
        raise ValueError(f"network input must be single-channel, got {rec.shape[-3]} channels")


def forward(
    model: Model,
    rec,
    mode: BorderMode = BorderMode.ZERO,
    context: Optional[Context] = None,
) -> np.ndarray:
    """Filter ``rec`` (``1xHxW`` or ``Nx1xHxW``): returns ``rec + residual``.

    With ``BorderMode.CONTEXT`` the block is extended by
    :func:`receptive_border` samples taken from ``context`` (which must hold
    them all), filtered, and cropped back, so every output sample sees real
    neighbours instead of zeros.
    """
    mode = BorderMode.parse(mode)
    rec = as_tensor(rec)
    _check_single_channel(rec)
    if mode is BorderMode.ZERO:
        residual, _ = _residual_branch(model, rec)
    else:
        if context is None:
            raise ValueError("ContextFill requires a context frame")
        a = receptive_border(model)
        frame = np.asarray(context.frame)
        h, w = rec.shape[-2:]
        t, l = context.top - a, context.left - a
        if t < 0 or l < 0 or context.top + h + a > frame.shape[-2] or context.left + w + a > frame.shape[-1]:
            raise ValueError(
                f"context must extend {a} samples beyond the block on every side"
            )
        ext = frame[..., t:context.top + h + a, l:context.left + w + a].astype(rec.dtype)
        ext[..., a:a + h, a:a + w] = rec
        residual, _ = _residual_branch(model, ext)
        residual = residual[..., a:a + h, a:a + w]
    out = np.asarray(rec, np.float64) + residual
    return out.astype(np.result_type(rec.dtype, residual.dtype), copy=False)


def default_hint_points(model: Model) -> Tuple[int, int, int]:
    """0-based DSC layer indices ending each third of the network (2/5/8 for K=9)."""
    k = model.config.num_dsc_layers
    return tuple(max(0, round(k * j / 3) - 1) for j in (1, 2, 3))


def hint_maps(model: Model, x, points: Optional[Sequence[int]] = None) -> List[np.ndarray]:
    """Post-ReLU feature stacks after the given 0-based DSC layers."""
    if points is None:
        points = default_hint_points(model)
    k = len(model.layers)
    for p in points:
        if not 0 <= p < k:
            raise IndexError(f"hint point {p} outside 0..{k - 1}")
    x = as_tensor(x)
    _check_single_channel(x)
    feats = {}
    for i, layer in enumerate(model.layers[: max(points) + 1]):
        x = dsc_layer_forward(layer, x)
        if i in points:
            feats[i] = x
    return [feats[p] for p in points]


# --------------------------------------------------------------------------
# BN folding


def fold_layer(layer: DscLayer) -> DscLayer:
    if layer.bn is None:
        raise ValueError("layer has no batch norm to fold")
    bn, pw = layer.bn, layer.pointwise
    dtype = pw.weight.dtype
    scale = np.asarray(bn.gamma, np.float64) / np.sqrt(np.asarray(bn.var, np.float64) + bn.eps)
    w = scale[:, None] * pw.weight.astype(np.float64)
    b = scale * (pw.bias.astype(np.float64) - bn.mean) + bn.beta
    return DscLayer(layer.depthwise, PointwiseKernel(w.astype(dtype), b.astype(dtype)), None)


def fold_bn(model: Model) -> Model:
    """Merge every layer's BN into its pointwise convolution (new model)."""
    for i, layer in enumerate(model.layers):
        if layer.bn is None:
            raise ValueError(f"DSC layer {i} has no batch norm; model already folded?")
    layers = tuple(fold_layer(layer) for layer in model.layers)
    return Model(layers, model.final, replace(model.config, with_bn=False))


# --------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class ParamCount:
    total: int
    layers: Tuple[int, ...]  # per DSC layer, then the final conv
    blocks: Tuple[int, ...]  # DSC layers grouped in thirds, then the final conv


def _dsc_params(layer: DscLayer) -> int:
    n = layer.depthwise.weight.size + layer.pointwise.weight.size + layer.pointwise.bias.size
    if layer.bn is not None:
        n += 2 * layer.bn.channels  # trainable gamma, beta
    return n


def param_count(model: Model) -> ParamCount:
    per_layer = [_dsc_params(layer) for layer in model.layers]
    final = model.final.weight.size + model.final.bias.size
    k = len(per_layer)
    bounds = [0] + [round(k * j / 3) for j in (1, 2, 3)]
    blocks = [sum(per_layer[a:b]) for a, b in zip(bounds, bounds[1:]) if b > a]
    return ParamCount(
        total=sum(per_layer) + final,
        layers=tuple(per_layer) + (final,),
        blocks=tuple(blocks) + (final,),
    )


def depthwise_macs(c: int, kw: int = 3, kh: int = 3) -> int:
    return kw * kh * c


def pointwise_macs(c_in: int, c_out: int) -> int:
    return c_in * c_out


def standard_macs(c_in: int, c_out: int, kw: int = 3, kh: int = 3) -> int:
    return kw * kh * c_in * c_out


def dsc_macs(c_in: int, c_out: int, kw: int = 3, kh: int = 3) -> int:
    return depthwise_macs(c_in, kw, kh) + pointwise_macs(c_in, c_out)


def macs_per_pixel(model: Model) -> int:
    total = sum(
        dsc_macs(layer.depthwise.in_ch, layer.pointwise.out_ch) for layer in model.layers
    )
    return total + standard_macs(model.final.in_ch, model.final.out_ch)


def flops_count(model: Model, width: int, height: int) -> int:
    """Multiply-accumulates for one ``width x height`` frame.

    Bias adds, BN and ReLU are not counted; double the result for a
    two-ops-per-MAC FLOP figure.
    """
    return macs_per_pixel(model) * width * height


def dsc_to_std_ratio(c_out: int, kw: int = 3, kh: int = 3) -> float:
    """Cost of a DSC layer relative to a standard convolution of equal shape."""
    if min(c_out, kw, kh) < 1:
        raise ValueError("c_out, kw and kh must all be >= 1")
    return 1.0 / c_out + 1.0 / (kw * kh)


def receptive_border(model) -> int:
    """Border width affected by padding: one sample per 3x3 stage.

    Accepts a :class:`Model`, a :class:`NetworkConfig` or a bare DSC depth.
    """
    if isinstance(model, Model):
        k = len(model.layers)
    elif isinstance(model, NetworkConfig):
        k = model.num_dsc_layers
    else:
        k = int(model)
        if k < 0:
            raise ValueError("depth must be >= 0")
    return k + 1
