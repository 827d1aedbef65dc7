"""Losses, optimizer and the teacher -> hint -> student training pipeline."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .network import (
    BN_MOMENTUM,
    BNParams,
    DscLayer,
    Model,
    NetworkConfig,
    STUDENT,
    TEACHER,
    build_model,
    cast_model,
    default_hint_points,
    fold_bn,
    hint_maps,
)
from .tensor import (
    DepthwiseKernel,
    OpRecord,
    PointwiseKernel,
    StandardKernel,
    backward,
    batch_norm,
    conv2d_depthwise,
    conv2d_pointwise,
    conv2d_standard,
    relu,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class QpBand(enum.Enum):
    LOW = "low"  # QP <= 24
    MID1 = "mid1"  # 25..29
    MID2 = "mid2"  # 30..34
    HIGH = "high"  # QP >= 35

    @classmethod
    def from_qp(cls, qp: int) -> "QpBand":
        if qp <= 24:
            return cls.LOW
        if qp <= 29:
            return cls.MID1
        if qp <= 34:
            return cls.MID2
        return cls.HIGH

    @classmethod
    def parse(cls, value) -> "QpBand":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown QP band {value!r}") from None

    @property
    def representative_qp(self) -> int:
        """The common-test-condition QP that falls in this band."""
        return {"low": 22, "mid1": 27, "mid2": 32, "high": 37}[self.value]

    @property
    def hint_epochs(self) -> int:
        return 10 if self in (QpBand.LOW, QpBand.MID1) else 20


@dataclass
class TrainConfig:
    band: QpBand = QpBand.HIGH
    n1: int = 5
    n2: int = 2
    n3: int = 5
    patch: int = 32
    batch: int = 2
    learning_rate: float = 1e-3
    seed: int = 0
    hint_loss: str = "at"
    p: float = 2.0
    teacher: NetworkConfig = TEACHER
    student: NetworkConfig = STUDENT

    def __post_init__(self):
        self.band = QpBand.parse(self.band)
        if min(self.n1, self.n2, self.n3) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.patch not in (32, 64):
            raise ValueError("patch must be 32 (HEVC) or 64 (VVC)")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.hint_loss not in ("at", "mmd"):
            raise ValueError("hint_loss must be 'at' or 'mmd'")

    @classmethod
    def full_schedule(cls, band, codec: str = "hevc", **overrides) -> "TrainConfig":
        band = QpBand.parse(band)
        kw = dict(band=band, n1=50, n2=band.hint_epochs, n3=50, patch=32 if codec == "hevc" else 64)
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class PatchPair:
    rec: np.ndarray  # (1, P, P) in [0, 1]
    orig: np.ndarray

    def __post_init__(self):
        if np.shape(self.rec) != np.shape(self.orig):
            raise ValueError("rec and orig patches differ in shape")


def sample_patches(
    frames: Sequence[Tuple[np.ndarray, np.ndarray]],
    patch: int,
    count: int,
    seed: int = 0,
    align: int = 8,
) -> List[PatchPair]:
    """Random ``patch x patch`` crops of ``(rec, orig)`` luma planes.

    Crop corners are drawn uniformly from positions that are multiples of
    ``align`` (the transform grid), so block edges sit at the same phase in
    every patch. Samples are scaled to [0, 1].
    """
    if not frames:
        raise ValueError("no frames to sample from")
    for rec, orig in frames:
        if np.shape(rec) != np.shape(orig):
            raise ValueError("rec/orig planes differ in shape")
        if rec.shape[0] < patch or rec.shape[1] < patch:
            raise ValueError(f"frame {rec.shape} smaller than patch {patch}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        rec, orig = frames[rng.integers(len(frames))]
        ny = (rec.shape[0] - patch) // align + 1
        nx = (rec.shape[1] - patch) // align + 1
        y = int(rng.integers(ny)) * align
        x = int(rng.integers(nx)) * align
        crop = np.s_[y:y + patch, x:x + patch]
        out.append(
            PatchPair(
                (np.asarray(rec[crop], np.float64) / 255.0)[None],
                (np.asarray(orig[crop], np.float64) / 255.0)[None],
            )
        )
    return out


# --------------------------------------------------------------------------
# losses


def mse_loss(pred, target) -> float:
    """Per-sample sum of squared errors, averaged over the batch axis."""
    pred, target = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 0 or pred.shape[0] < 1:
        raise ValueError("need a batch of at least one sample")
    return float(((pred - target) ** 2).sum() / pred.shape[0])


def mse_loss_grad(pred, target) -> np.ndarray:
    pred, target = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    return 2.0 * (pred - target) / pred.shape[0]


def attention_map(features, p: float = 2.0, return_flag: bool = False):
    """Channel-summed ``|f|^p`` map of a ``(C, H, W)`` stack, L2-normalized.

    An all-zero map has no direction; it is returned as zeros and, with
    ``return_flag``, reported as degenerate.
    """
    f = np.asarray(features, np.float64)
    if f.ndim != 3 or f.shape[0] < 1:
        raise ValueError(f"features must be (C, H, W) with C >= 1, got {f.shape}")
    a = (np.abs(f) ** p).sum(axis=0)
    norm = np.sqrt((a * a).sum())
    degenerate = norm == 0.0
    if degenerate:
        log.warning("attention map has zero norm; using the zero map")
        a = np.zeros_like(a)
    else:
        a = a / norm
    return (a, degenerate) if return_flag else a


def _check_spatial(t: np.ndarray, s: np.ndarray) -> None:
    if t.shape[-2:] != s.shape[-2:]:
        raise ValueError(f"spatial mismatch {t.shape[-2:]} vs {s.shape[-2:]}")


def at_loss(teacher_feats, student_feats, p: float = 2.0) -> float:
    t, s = np.asarray(teacher_feats), np.asarray(student_feats)
    _check_spatial(t, s)
    d = attention_map(t, p) - attention_map(s, p)
    return float((d * d).sum())


def at_loss_grad(target_map: np.ndarray, student_feats, p: float = 2.0) -> Tuple[float, np.ndarray]:
    """AT loss against a precomputed normalized teacher map, and d/d(student)."""
    f = np.asarray(student_feats, np.float64)
    _check_spatial(target_map, f)
    a = (np.abs(f) ** p).sum(axis=0)
    norm = np.sqrt((a * a).sum())
    if norm == 0.0:
        return float((target_map ** 2).sum()), np.zeros_like(f)
    q = a / norm
    d = q - target_map
    u = 2.0 * d
    ga = (u - q * (q * u).sum()) / norm
    gf = ga[None] * p * np.abs(f) ** (p - 1) * np.sign(f)
    return float((d * d).sum()), gf


def _channel_mean_direction(f: np.ndarray):
    flat = f.reshape(f.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    live = norms > 0
    if not live.all():
        log.debug("skipping %d zero-norm channel(s) in MMD", int((~live).sum()))
    if not live.any():
        return np.zeros(flat.shape[1]), flat, norms, live
    unit = flat[live] / norms[live, None]
    return unit.mean(axis=0), flat, norms, live


def mmd_target(features) -> np.ndarray:
    """Mean of the L2-normalized channels of a ``(C, H, W)`` stack, as ``(H, W)``."""
    f = np.asarray(features, np.float64)
    m, *_ = _channel_mean_direction(f)
    return m.reshape(f.shape[-2:])


def mmd_loss(teacher_feats, student_feats) -> float:
    """Squared MMD with a linear kernel; zero-norm channels are left out."""
    t, s = np.asarray(teacher_feats), np.asarray(student_feats)
    _check_spatial(t, s)
    d = mmd_target(t) - mmd_target(s)
    return float((d * d).sum())


def mmd_loss_grad(target: np.ndarray, student_feats) -> Tuple[float, np.ndarray]:
    f = np.asarray(student_feats, np.float64)
    _check_spatial(target, f)
    m, flat, norms, live = _channel_mean_direction(f)
    d = m - target.reshape(-1)
    u = 2.0 * d
    g = np.zeros_like(flat)
    n_live = int(live.sum())
    if n_live:
        unit = flat[live] / norms[live, None]
        g[live] = (u[None] - unit * (unit @ u)[:, None]) / (n_live * norms[live, None])
    return float((d * d).sum()), g.reshape(f.shape)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One Adam update. Parameters without a gradient entry are left alone."""
    t = state.t + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, param {np.shape(p)}")
        mi = ADAM_BETA1 * m.get(name, 0.0) + (1 - ADAM_BETA1) * g
        vi = ADAM_BETA2 * v.get(name, 0.0) + (1 - ADAM_BETA2) * g * g
        mhat = mi / (1 - ADAM_BETA1 ** t)
        vhat = vi / (1 - ADAM_BETA2 ** t)
        new_params[name] = p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        m[name], v[name] = mi, vi
    return new_params, AdamState(m, v, t)


# --------------------------------------------------------------------------
# differentiable chain


def model_to_params(model: Model) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Split a model into trainable float64 parameters and BN running statistics."""
    params, stats = {}, {}
    for i, layer in enumerate(model.layers):
        params[f"dw{i}"] = layer.depthwise.weight.astype(np.float64)
        params[f"pw{i}.w"] = layer.pointwise.weight.astype(np.float64)
        params[f"pw{i}.b"] = layer.pointwise.bias.astype(np.float64)
        if layer.bn is not None:
            params[f"bn{i}.gamma"] = layer.bn.gamma.astype(np.float64)
            params[f"bn{i}.beta"] = layer.bn.beta.astype(np.float64)
            stats[f"bn{i}.mean"] = layer.bn.mean.astype(np.float64)
            stats[f"bn{i}.var"] = layer.bn.var.astype(np.float64)
    params["final.w"] = model.final.weight.astype(np.float64)
    params["final.b"] = model.final.bias.astype(np.float64)
    return params, stats


def params_to_model(params, stats, config: NetworkConfig, eps: float) -> Model:
    layers = []
    for i in range(config.num_dsc_layers):
        bn = None
        if f"bn{i}.gamma" in params:
            bn = BNParams(
                params[f"bn{i}.gamma"], params[f"bn{i}.beta"],
                stats[f"bn{i}.mean"], stats[f"bn{i}.var"], eps,
            )
        layers.append(
            DscLayer(
                DepthwiseKernel(params[f"dw{i}"]),
                PointwiseKernel(params[f"pw{i}.w"], params[f"pw{i}.b"]),
                bn,
            )
        )
    return Model(tuple(layers), StandardKernel(params["final.w"], params["final.b"]), config)


def _bn_eps(model: Model) -> float:
    for layer in model.layers:
        if layer.bn is not None:
            return layer.bn.eps
    return 1e-3


@dataclass
class ChainCache:
    records: List[Tuple[int, List[OpRecord]]]
    final: Optional[OpRecord]
    feats: Dict[int, np.ndarray]
    batch_stats: Dict[int, Tuple[np.ndarray, np.ndarray]]


def chain_forward(
    params: Dict[str, np.ndarray],
    stats: Dict[str, np.ndarray],
    num_layers: int,
    x: np.ndarray,
    bn_training: bool = True,
    stop_after: Optional[int] = None,
    keep: Sequence[int] = (),
    eps: float = 1e-3,
) -> Tuple[Optional[np.ndarray], ChainCache]:
    """Forward pass keeping what :func:`chain_backward` needs.

    ``x`` is ``(N, 1, H, W)``. Returns the full output ``x + residual`` or,
    with ``stop_after``, ``None`` after that DSC layer.
    """
    inp = x
    cache = ChainCache([], None, {}, {})
    for i in range(num_layers):
        recs = []
        dw = DepthwiseKernel(params[f"dw{i}"])
        recs.append(OpRecord("depthwise", x, dw))
        y = conv2d_depthwise(x, dw)
        pw = PointwiseKernel(params[f"pw{i}.w"], params[f"pw{i}.b"])
        recs.append(OpRecord("pointwise", y, pw))
        y = conv2d_pointwise(y, pw)
        if f"bn{i}.gamma" in params:
            g, b = params[f"bn{i}.gamma"], params[f"bn{i}.beta"]
            if bn_training:
                z, bm, bv = batch_norm(y, g, b, eps=eps, training=True)
                cache.batch_stats[i] = (bm, bv)
                recs.append(OpRecord("bn_train", y, params=(g, b, bm, bv, eps)))
            else:
                m, v = stats[f"bn{i}.mean"], stats[f"bn{i}.var"]
                z = batch_norm(y, g, b, m, v, eps)
                recs.append(OpRecord("bn_eval", y, params=(g, b, m, v, eps)))
            y = z
        recs.append(OpRecord("relu", y))
        x = relu(y)
        cache.records.append((i, recs))
        if i in keep:
            cache.feats[i] = x
        if stop_after is not None and i >= stop_after:
            return None, cache
    fk = StandardKernel(params["final.w"], params["final.b"])
    cache.final = OpRecord("standard", x, fk)
    return inp + conv2d_standard(x, fk), cache


def chain_backward(
    cache: ChainCache,
    grad_out: Optional[np.ndarray] = None,
    feat_grads: Optional[Dict[int, np.ndarray]] = None,
) -> Dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(output) and/or d(loss)/d(hint features)."""
    feat_grads = feat_grads or {}
    grads: Dict[str, np.ndarray] = {}
    g = None
    if grad_out is not None:
        gr = backward(cache.final, grad_out)
        grads["final.w"], grads["final.b"] = gr.weight, gr.bias
        g = gr.x
    for i, recs in reversed(cache.records):
        if i in feat_grads:
            g = feat_grads[i] if g is None else g + feat_grads[i]
        if g is None:
            continue
        for rec in reversed(recs):
            gr = backward(rec, g)
            g = gr.x
            if rec.op == "depthwise":
                grads[f"dw{i}"] = gr.weight
            elif rec.op == "pointwise":
                grads[f"pw{i}.w"], grads[f"pw{i}.b"] = gr.weight, gr.bias
            elif rec.op.startswith("bn"):
                grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = gr.weight, gr.bias
    return grads


def _update_running(stats, batch_stats, momentum: float = BN_MOMENTUM) -> Dict[str, np.ndarray]:
    stats = dict(stats)
    for i, (bm, bv) in batch_stats.items():
        stats[f"bn{i}.mean"] = momentum * stats[f"bn{i}.mean"] + (1 - momentum) * bm
        stats[f"bn{i}.var"] = momentum * stats[f"bn{i}.var"] + (1 - momentum) * bv
    return stats


# --------------------------------------------------------------------------
# pipeline


def _stack(pairs: Sequence[PatchPair]) -> Tuple[np.ndarray, np.ndarray]:
    rec = np.stack([p.rec for p in pairs]).astype(np.float64)
    orig = np.stack([p.orig for p in pairs]).astype(np.float64)
    return rec, orig


def _batches(n: int, batch: int, rng: Optional[np.random.Generator]):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for s in range(0, n, batch):
        yield order[s:s + batch]


@dataclass
class Trainee:
    """A model unpacked into float64 parameters plus optimizer state."""

    params: Dict[str, np.ndarray]
    stats: Dict[str, np.ndarray]
    config: NetworkConfig
    eps: float
    adam: AdamState = field(default_factory=AdamState)

    @classmethod
    def from_model(cls, model: Model) -> "Trainee":
        params, stats = model_to_params(model)
        return cls(params, stats, model.config, _bn_eps(model))

    def to_model(self, dtype=np.float32) -> Model:
        return cast_model(params_to_model(self.params, self.stats, self.config, self.eps), dtype)

    def forward(self, x, bn_training=True, **kw):
        return chain_forward(
            self.params, self.stats, self.config.num_dsc_layers, x, bn_training, eps=self.eps, **kw
        )

    def step(self, grads, lr: float, batch_stats) -> None:
        self.params, self.adam = adam_step(self.params, grads, self.adam, lr)
        self.stats = _update_running(self.stats, batch_stats)


def mse_epoch(trainee: Trainee, rec, orig, batch: int, lr: float, rng) -> float:
    losses = []
    for idx in _batches(len(rec), batch, rng):
        out, cache = trainee.forward(rec[idx])
        losses.append(mse_loss(out, orig[idx]))
        grads = chain_backward(cache, grad_out=mse_loss_grad(out, orig[idx]))
        trainee.step(grads, lr, cache.batch_stats)
    return float(np.mean(losses))


def evaluate_mse(trainee: Trainee, rec, orig, batch: int) -> float:
    """Mean batch L_S in training-mode BN over a fixed batch order (no update)."""
    losses = [
        mse_loss(trainee.forward(rec[idx])[0], orig[idx])
        for idx in _batches(len(rec), batch, None)
    ]
    return float(np.mean(losses))


def hint_targets(
    teacher: Model, rec: np.ndarray, kind: str, p: float, points: Sequence[int], batch: int = 16
) -> List[np.ndarray]:
    """Per-sample normalized teacher statistics at each hint point, ``(N, H, W)`` each."""
    out = [[] for _ in points]
    for s in range(0, len(rec), batch):
        feats = hint_maps(teacher, rec[s:s + batch], points)
        for j, f in enumerate(feats):
            f = np.asarray(f, np.float64)
            if kind == "at":
                out[j].extend(attention_map(fi, p) for fi in f)
            else:
                out[j].extend(mmd_target(fi) for fi in f)
    return [np.stack(o) for o in out]


def hint_epoch(trainee: Trainee, rec, targets, points, kind: str, p: float, batch: int, lr: float, rng) -> float:
    losses = []
    last = max(points)
    for idx in _batches(len(rec), batch, rng):
        _, cache = trainee.forward(rec[idx], stop_after=last, keep=points)
        total = 0.0
        fgrads = {}
        n = len(idx)
        for j, pt in enumerate(points):
            feats = cache.feats[pt]
            g = np.zeros(feats.shape)
            for b, sample in enumerate(idx):
                if kind == "at":
                    l, gs = at_loss_grad(targets[j][sample], feats[b], p)
                else:
                    l, gs = mmd_loss_grad(targets[j][sample], feats[b])
                total += l / n
                g[b] = gs / n
            fgrads[pt] = g
        losses.append(total)
        grads = chain_backward(cache, feat_grads=fgrads)
        trainee.step(grads, lr, cache.batch_stats)
    return float(np.mean(losses))


@dataclass
class TrainResult:
    student: Model  # folded
    unfolded: Model
    teacher: Optional[Model]
    history: List[dict]
    ls_initial: float  # student L_S before any training
    ls_phase3_start: float  # student L_S after the hint phase


def train_pipeline(
    dataset: Sequence[PatchPair],
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Teacher pre-training, hint initialization, student fine-tuning, BN fold."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rec, orig = _stack(dataset)
    history: List[dict] = []

    def emit(phase, epoch, loss):
        entry = {"phase": phase, "epoch": epoch, "loss": loss}
        history.append(entry)
        log.info("phase=%s epoch=%d loss=%.6g", phase, epoch, loss)
        if on_epoch is not None:
            on_epoch(entry)

    rng = np.random.default_rng(cfg.seed)
    teacher = None
    if cfg.n1 > 0 or cfg.n2 > 0:
        t = Trainee.from_model(build_model(cfg.teacher, cfg.seed, np.float64))
        for e in range(cfg.n1):
            emit("teacher", e + 1, mse_epoch(t, rec, orig, cfg.batch, cfg.learning_rate, rng))
        teacher = t.to_model(np.float64)

    s = Trainee.from_model(build_model(cfg.student, cfg.seed + 1, np.float64))
    ls_initial = evaluate_mse(s, rec, orig, cfg.batch)

    if cfg.n2 > 0:
        s_model = s.to_model(np.float64)
        t_points = default_hint_points(teacher)
        s_points = default_hint_points(s_model)
        targets = hint_targets(teacher, rec, cfg.hint_loss, cfg.p, t_points, cfg.batch)
        for e in range(cfg.n2):
            loss = hint_epoch(s, rec, targets, s_points, cfg.hint_loss, cfg.p, cfg.batch, cfg.learning_rate, rng)
            emit(f"hint-{cfg.hint_loss}", e + 1, loss)
        # the output-stage optimizer moments start fresh for the MSE phase
        s.adam = AdamState()
    ls_phase3 = evaluate_mse(s, rec, orig, cfg.batch)

    for e in range(cfg.n3):
        emit("student", e + 1, mse_epoch(s, rec, orig, cfg.batch, cfg.learning_rate, rng))

    unfolded = s.to_model(np.float32)
    folded = fold_bn(s.to_model(np.float64))
    return TrainResult(
        student=cast_model(folded, np.float32),
        unfolded=unfolded,
        teacher=teacher,
        history=history,
        ls_initial=ls_initial,
        ls_phase3_start=ls_phase3,
    )
