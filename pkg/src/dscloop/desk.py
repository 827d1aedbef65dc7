"""Desk-scale experiment: synthetic content, toy codec, small training run.

Everything here is deterministic per seed so the result can be pinned in a
test and reproduced from ``scripts/desk_run.py``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .codec import psnr_plane, synthetic_frame, toy_encode
from .filtering import network_plane
from .network import Model
from .training import TrainConfig, TrainResult, sample_patches, train_pipeline


@dataclass
class DeskConfig:
    qp: int = 37
    size: int = 128
    train_frames: int = 8
    val_frames: int = 4
    val_seed_offset: int = 100
    patches: int = 200
    train: TrainConfig = field(default_factory=lambda: TrainConfig(band="high", n1=5, n2=2, n3=5, batch=2))


@dataclass
class DeskResult:
    train: TrainResult
    psnr_rec: List[float]
    psnr_filtered: List[float]

    @property
    def gains(self) -> List[float]:
        return [b - a for a, b in zip(self.psnr_rec, self.psnr_filtered)]

    @property
    def mean_gain(self) -> float:
        return float(np.mean(self.gains))


def coded_pairs(seeds: Sequence[int], size: int, qp: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """``(reconstruction, original)`` luma planes of synthetic frames."""
    out = []
    for s in seeds:
        f = synthetic_frame(size, size, seed=s)
        rec, _ = toy_encode(f, qp)
        out.append((rec.luma, f.luma))
    return out


def evaluate(model: Model, pairs) -> Tuple[List[float], List[float]]:
    before, after = [], []
    for rec, orig in pairs:
        before.append(psnr_plane(rec, orig))
        after.append(psnr_plane(network_plane(model, rec), orig))
    return before, after


def run(cfg: Optional[DeskConfig] = None, on_epoch=None) -> DeskResult:
    cfg = cfg or DeskConfig()
    train = coded_pairs(range(cfg.train_frames), cfg.size, cfg.qp)
    val = coded_pairs(
        range(cfg.val_seed_offset, cfg.val_seed_offset + cfg.val_frames), cfg.size, cfg.qp
    )
    patches = sample_patches(train, cfg.train.patch, cfg.patches, seed=cfg.train.seed)
    result = train_pipeline(patches, cfg.train, on_epoch)
    before, after = evaluate(result.student, val)
    return DeskResult(result, before, after)
