"""Residual mapping (RM): frame-level scaling of the learned residual.

The decoder gets ``Y = X + lambda * R_S`` where ``R_S`` is the network
residual and ``lambda = i / (2**n - 1)`` is chosen per colour component by
an exhaustive search over the ``2**n`` grid points. Sample-domain rounding
and clipping are part of the search so encoder and decoder agree exactly.

Frame- and CTU-level on/off control are provided as comparison baselines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_BITS = 5
COMPONENTS = 3


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def residual_distortion(orig, rec) -> np.ndarray:
    """Coding distortion ``orig - rec``."""
    o, x = _pair(orig, rec)
    return o - x


def residual_learned(filtered, rec) -> np.ndarray:
    """What the filter added: ``filtered - rec``."""
    f, x = _pair(filtered, rec)
    return f - x


def fit_lambda_closed(r_s, r_o, return_flag: bool = False):
    """Least-squares scale mapping ``r_s`` onto ``r_o``.

    A zero learned residual has no preferred scale; lambda is 0 and, with
    ``return_flag``, the degenerate case is reported.
    """
    s, o = _pair(r_s, r_o)
    den = float((s * s).sum())
    if den == 0.0:
        return (0.0, True) if return_flag else 0.0
    lam = float((s * o).sum()) / den
    return (lam, False) if return_flag else lam


def levels(n: int) -> int:
    if n < 1:
        raise ValueError("need at least one bit")
    return (1 << n) - 1


def quantize_lambda(lam: float, n: int = DEFAULT_BITS) -> int:
    """Nearest grid index for ``lam`` clamped to [0, 1]; halves round up."""
    top = levels(n)
    lam = min(max(float(lam), 0.0), 1.0)
    return int(np.floor(lam * top + 0.5))


def lambda_from_index(i: int, n: int = DEFAULT_BITS) -> float:
    top = levels(n)
    if not 0 <= i <= top:
        raise ValueError(f"index {i} outside [0, {top}]")
    return i / top


def rm_apply(rec, r_s, lam: float, peak: int = 255) -> np.ndarray:
    """``rec + lam * r_s`` rounded (half up) and clipped to 8-bit samples."""
    x, s = _pair(rec, r_s)
    return np.clip(np.floor(x + lam * s + 0.5), 0, peak).astype(np.uint8)


def rdo_search(rec, filtered, orig, n: int = DEFAULT_BITS) -> int:
    """Grid index whose mapped output is closest to ``orig`` in SSE.

    The signalling cost is a constant 3n bits per frame, so rate drops out
    and the search is distortion-only. Ties go to the smaller index.
    """
    x, f = _pair(rec, filtered)
    _, o = _pair(rec, orig)
    r_s = f - x
    best, best_sse = 0, None
    for i in range(levels(n) + 1):
        d = rm_apply(x, r_s, i / levels(n)).astype(np.float64) - o
        e = float((d * d).sum())
        if best_sse is None or e < best_sse:
            best, best_sse = i, e
    return best


@dataclass(frozen=True)
class RmParams:
    """Per-component RM indices (Y, U, V) and their bit width."""

    indices: Tuple[int, int, int]
    n: int = DEFAULT_BITS

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(idx) != COMPONENTS:
            raise ValueError("RM carries exactly three component indices")
        top = levels(self.n)
        for i in idx:
            if not 0 <= i <= top:
                raise ValueError(f"index {i} outside [0, {top}]")
        object.__setattr__(self, "indices", idx)

    @property
    def lambdas(self) -> Tuple[float, float, float]:
        return tuple(lambda_from_index(i, self.n) for i in self.indices)


def syntax_bytes(n: int = DEFAULT_BITS) -> int:
    return (COMPONENTS * n + 7) // 8


def serialize_rm(params: RmParams) -> bytes:
    """Y, U, V indices MSB-first at ``n`` bits each, zero-padded to a byte boundary."""
    word = 0
    for i in params.indices:
        word = (word << params.n) | i
    nbytes = syntax_bytes(params.n)
    word <<= nbytes * 8 - COMPONENTS * params.n
    return word.to_bytes(nbytes, "big")


def deserialize_rm(blob: bytes, n: int = DEFAULT_BITS) -> RmParams:
    nbytes = syntax_bytes(n)
    if len(blob) != nbytes:
        raise ValueError(f"RM syntax is {nbytes} bytes, got {len(blob)}")
    word = int.from_bytes(blob, "big")
    pad = nbytes * 8 - COMPONENTS * n
    if word & ((1 << pad) - 1):
        raise ValueError("RM padding bits must be zero")
    word >>= pad
    mask = levels(n)
    idx = [(word >> (n * (COMPONENTS - 1 - c))) & mask for c in range(COMPONENTS)]
    return RmParams(tuple(idx), n)


# --------------------------------------------------------------------------
# on/off control baselines


def frame_control(rec, filtered, orig) -> bool:
    """Use the filter only if it strictly lowers the SSE."""
    x, f = _pair(rec, filtered)
    _, o = _pair(rec, orig)
    return float(((f - o) ** 2).sum()) < float(((x - o) ** 2).sum())


def ctu_grid(height: int, width: int, ctu: int = 64) -> Tuple[int, int]:
    return -(-height // ctu), -(-width // ctu)


def ctu_compose(rec, filtered, flags: np.ndarray, ctu: int = 64) -> np.ndarray:
    """Take ``filtered`` in CTUs whose flag is set and ``rec`` elsewhere."""
    rec, filtered = np.asarray(rec), np.asarray(filtered)
    if rec.shape != filtered.shape:
        raise ValueError(f"dimension mismatch {rec.shape} vs {filtered.shape}")
    if flags.shape != ctu_grid(*rec.shape, ctu):
        raise ValueError(f"flag grid {flags.shape} does not match frame {rec.shape}")
    mask = np.kron(flags.astype(bool), np.ones((ctu, ctu), bool))[: rec.shape[0], : rec.shape[1]]
    return np.where(mask, filtered, rec)


def ctu_control(rec, filtered, orig, ctu: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Per-CTU on/off decisions (edge CTUs may be partial) and the composite plane."""
    x, f = _pair(rec, filtered)
    _, o = _pair(rec, orig)
    rows, cols = ctu_grid(*x.shape, ctu)
    flags = np.zeros((rows, cols), bool)
    for r in range(rows):
        for c in range(cols):
            blk = np.s_[r * ctu:(r + 1) * ctu, c * ctu:(c + 1) * ctu]
            flags[r, c] = frame_control(x[blk], f[blk], o[blk])
    return flags, ctu_compose(np.asarray(rec), np.asarray(filtered), flags, ctu)
