"""Toy intra codec, quality/rate metrics and padding-impact analysis.

The codec stands in for an HEVC reconstruction: 8x8 orthonormal DCT,
uniform scalar quantization with step ``2 ** ((qp - 4) / 6)`` and clipping.
No prediction, no loop filters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .network import receptive_border  # noqa: F401  (re-exported)

BLOCK = 8
MAX_QP = 51
LOSSLESS_PSNR = math.inf


@dataclass(frozen=True)
class Frame:
    """8-bit luma or 4:2:0 YUV frame."""

    planes: Tuple[np.ndarray, ...]
    qp: Optional[int] = None
    bit_depth: int = field(default=8, init=False)

    def __post_init__(self):
        planes = tuple(np.asarray(p) for p in self.planes)
        if len(planes) not in (1, 3):
            raise ValueError(f"a frame has 1 or 3 planes, got {len(planes)}")
        for p in planes:
            if p.ndim != 2:
                raise ValueError("planes must be 2-D")
            if np.issubdtype(p.dtype, np.floating) or p.min() < 0 or p.max() > 255:
                raise ValueError("samples must be integers in [0, 255]")
        h, w = planes[0].shape
        for p in planes[1:]:
            if p.shape != ((h + 1) // 2, (w + 1) // 2):
                raise ValueError(f"chroma plane {p.shape} is not 4:2:0 of {(h, w)}")
        object.__setattr__(self, "planes", tuple(p.astype(np.uint8) for p in planes))

    @property
    def height(self) -> int:
        return self.planes[0].shape[0]

    @property
    def width(self) -> int:
        return self.planes[0].shape[1]

    @property
    def luma(self) -> np.ndarray:
        return self.planes[0]

    def same_layout(self, other: "Frame") -> bool:
        return [p.shape for p in self.planes] == [p.shape for p in other.planes]


def _check_layout(a: Frame, b: Frame) -> None:
    if not a.same_layout(b):
        raise ValueError("frames differ in dimensions or plane count")


# --------------------------------------------------------------------------
# transform


def _dct_matrix(n: int = BLOCK) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


DCT8 = _dct_matrix()


def _check_block(block) -> np.ndarray:
    b = np.asarray(block, np.float64)
    if b.shape[-2:] != (BLOCK, BLOCK):
        raise ValueError(f"expected 8x8 block(s), got {b.shape}")
    return b


def dct8x8(block) -> np.ndarray:
    """Orthonormal 2-D DCT-II of one 8x8 block (or a stack of them)."""
    return DCT8 @ _check_block(block) @ DCT8.T


def idct8x8(coefs) -> np.ndarray:
    return DCT8.T @ _check_block(coefs) @ DCT8


# --------------------------------------------------------------------------
# toy codec


def qstep(qp: int) -> float:
    return 2.0 ** ((qp - 4) / 6.0)


def _check_qp(qp: int) -> None:
    if not 0 <= qp <= MAX_QP:
        raise ValueError(f"qp {qp} outside [0, {MAX_QP}]")


def _to_blocks(plane: np.ndarray) -> Tuple[np.ndarray, Tuple[int, int]]:
    h, w = plane.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    p = np.pad(plane.astype(np.float64), ((0, ph), (0, pw)), mode="edge")
    hb, wb = p.shape[0] // BLOCK, p.shape[1] // BLOCK
    blocks = p.reshape(hb, BLOCK, wb, BLOCK).transpose(0, 2, 1, 3)
    return blocks, (h, w)


def _from_blocks(blocks: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    hb, wb = blocks.shape[:2]
    p = blocks.transpose(0, 2, 1, 3).reshape(hb * BLOCK, wb * BLOCK)
    return p[: shape[0], : shape[1]]


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_plane(plane: np.ndarray, qp: int) -> np.ndarray:
    """Quantized DCT levels, shape ``(rows, cols, 8, 8)`` of int32."""
    _check_qp(qp)
    blocks, _ = _to_blocks(plane)
    coefs = dct8x8(blocks - 128.0)
    return _round_half_away(coefs / qstep(qp)).astype(np.int32)


def dequantize_plane(levels: np.ndarray, qp: int, shape: Tuple[int, int]) -> np.ndarray:
    _check_qp(qp)
    pix = idct8x8(levels.astype(np.float64) * qstep(qp)) + 128.0
    return np.clip(np.floor(_from_blocks(pix, shape) + 0.5), 0, 255).astype(np.uint8)


def estimate_bits(levels: np.ndarray) -> float:
    """Zero-order entropy of the levels, per coefficient position, plus 1 bit per block.

    The per-block bit models an end-of-block flag and keeps the rate of an
    all-zero plane positive.
    """
    flat = levels.reshape(-1, BLOCK * BLOCK)
    n = flat.shape[0]
    bits = float(n)
    for k in range(flat.shape[1]):
        _, counts = np.unique(flat[:, k], return_counts=True)
        prob = counts / n
        bits += float(-(counts * np.log2(prob)).sum())
    return bits


@dataclass(frozen=True)
class ToyBitstream:
    """What the decoder needs: per-plane levels, plane shapes and the QP."""

    levels: Tuple[np.ndarray, ...]
    shapes: Tuple[Tuple[int, int], ...]
    qp: int


def toy_analyze(frame: Frame, qp: int) -> ToyBitstream:
    _check_qp(qp)
    return ToyBitstream(
        tuple(quantize_plane(p, qp) for p in frame.planes),
        tuple(p.shape for p in frame.planes),
        qp,
    )


def toy_decode(bs: ToyBitstream) -> Frame:
    planes = tuple(dequantize_plane(l, bs.qp, s) for l, s in zip(bs.levels, bs.shapes))
    return Frame(planes, qp=bs.qp)


def toy_encode(frame: Frame, qp: int) -> Tuple[Frame, float]:
    """Encode and reconstruct; returns ``(rec, estimated bits)``."""
    bs = toy_analyze(frame, qp)
    return toy_decode(bs), sum(estimate_bits(l) for l in bs.levels)


# --------------------------------------------------------------------------
# metrics


def sse(a, b) -> float:
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return float((d * d).sum())


def psnr_plane(a, b, peak: float = 255.0) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    mse = sse(a, b) / a.size
    if mse == 0:
        return LOSSLESS_PSNR
    return 10.0 * math.log10(peak * peak / mse)


def psnr(a: Frame, b: Frame, plane: int = 0) -> float:
    """PSNR in dB of one plane (luma by default); ``inf`` when identical."""
    _check_layout(a, b)
    return psnr_plane(a.planes[plane], b.planes[plane])


@dataclass(frozen=True)
class RdPoint:
    rate: float  # bits
    psnr: float  # dB

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")


def bd_rate(anchor: Sequence[RdPoint], test: Sequence[RdPoint]) -> float:
    """Bjontegaard delta rate of ``test`` against ``anchor``, in percent.

    Log-rate is fitted as a cubic in PSNR for each curve and the fits are
    integrated in closed form over the shared PSNR interval. Negative means
    ``test`` needs fewer bits for the same quality.
    """
    if len(anchor) < 4 or len(test) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    qa = np.array([p.psnr for p in anchor], np.float64)
    qt = np.array([p.psnr for p in test], np.float64)
    if not (np.all(np.isfinite(qa)) and np.all(np.isfinite(qt))):
        raise ValueError("BD-rate needs finite PSNR values")
    ra = np.log([p.rate for p in anchor])
    rt = np.log([p.rate for p in test])
    lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    if not hi > lo:
        raise ValueError("PSNR ranges of the two curves do not overlap")
    pa = np.polyint(np.polyfit(qa, ra, 3))
    pt = np.polyint(np.polyfit(qt, rt, 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    it = np.polyval(pt, hi) - np.polyval(pt, lo)
    return float((math.exp((it - ia) / (hi - lo)) - 1.0) * 100.0)


# --------------------------------------------------------------------------
# padding analysis


def padding_impact_frame(width: int, height: int, a: int) -> float:
    """Share of a frame within ``a`` samples of its border."""
    if a < 0 or 2 * a >= min(width, height):
        raise ValueError("need 0 <= 2a < min(W, H)")
    return 2 * a * (width + height - 2 * a) / (width * height)


def padding_impact_block(h: int, a: int) -> Tuple[float, float]:
    """Share of an ``h x h`` block within ``a`` samples of its border: (exact, 4a/h)."""
    if a < 0 or 2 * a > h:
        raise ValueError("need 0 <= 2a <= h")
    return 4 * a * (h - a) / (h * h), 4 * a / h


# --------------------------------------------------------------------------
# synthetic content


def synthetic_image(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Piecewise-smooth test picture: shaded background, flat and textured shapes, grain."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.full((height, width), rng.uniform(60, 190))
    for _ in range(3):
        fy, fx = rng.uniform(0.2, 2.0, 2) * np.pi / np.array([height, width])
        img += rng.uniform(10, 30) * np.cos(fy * y + fx * x + rng.uniform(0, 2 * np.pi))
    for _ in range(int(rng.integers(6, 12))):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry, rx = rng.uniform(4, max(4.0, height / 3)), rng.uniform(4, max(4.0, width / 3))
        if rng.random() < 0.5:
            mask = ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(y - cy) <= ry) & (np.abs(x - cx) <= rx)
        level = rng.uniform(20, 235)
        if rng.random() < 0.35:
            period = rng.uniform(3, 12)
            theta = rng.uniform(0, np.pi)
            stripes = np.sin(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / period)
            level = level + rng.uniform(10, 40) * stripes
            img[mask] = level[mask]
        else:
            img[mask] = level
    img += rng.normal(0.0, 2.0, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def synthetic_frame(height: int, width: int, seed: int = 0, chroma: bool = False) -> Frame:
    luma = synthetic_image(height, width, seed)
    if not chroma:
        return Frame((luma,))
    ch, cw = (height + 1) // 2, (width + 1) // 2
    u = synthetic_image(ch, cw, seed + 10_000)
    v = synthetic_image(ch, cw, seed + 20_000)
    return Frame((luma, u, v))
