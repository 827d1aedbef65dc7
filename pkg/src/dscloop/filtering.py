"""Frame-level application of the network and the filter control modes.

The encoder side (:func:`encode_control`) sees the original frame and
decides the side information; the decoder side (:func:`decode_control`)
rebuilds the same output from the reconstruction, the network output and
that side information alone.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .codec import Frame
from .network import Model, forward, receptive_border
from .rm import (
    RmParams,
    ctu_compose,
    ctu_control,
    ctu_grid,
    deserialize_rm,
    frame_control,
    lambda_from_index,
    rdo_search,
    residual_learned,
    rm_apply,
    serialize_rm,
)
from .tensor import BorderMode, Context

TILE = 128


def _to_samples(out: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(out, np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def network_plane(model: Model, plane: np.ndarray, tile: int = TILE) -> np.ndarray:
    """Network output for a whole plane with zero fill at the picture edges.

    Inference runs tile by tile with ContextFill from the zero-extended
    plane, which equals whole-plane inference but bounds memory use.
    """
    a = receptive_border(model)
    x = np.asarray(plane, np.float64) / 255.0
    h, w = x.shape
    ext = np.pad(x, a)[None]
    out = np.empty((h, w))
    for y in range(0, h, tile):
        for x0 in range(0, w, tile):
            blk = ext[:, a + y:a + min(y + tile, h), a + x0:a + min(x0 + tile, w)]
            out[y:y + blk.shape[1], x0:x0 + blk.shape[2]] = forward(
                model, blk, BorderMode.CONTEXT, Context(ext, a + y, a + x0)
            )[0]
    return _to_samples(out)


def network_plane_blocks(model: Model, plane: np.ndarray, block: int, border: BorderMode) -> np.ndarray:
    """Network output computed independently per ``block x block`` region.

    ``ZERO`` fills outside each block with zeros (CTU-wise same padding);
    ``CONTEXT`` reads neighbouring reconstructed samples (valid padding).
    """
    border = BorderMode.parse(border)
    a = receptive_border(model)
    x = np.asarray(plane, np.float64) / 255.0
    h, w = x.shape
    ext = np.pad(x, a)[None]
    out = np.empty((h, w))
    for y in range(0, h, block):
        for x0 in range(0, w, block):
            blk = x[None, y:min(y + block, h), x0:min(x0 + block, w)]
            if border is BorderMode.ZERO:
                res = forward(model, blk)
            else:
                res = forward(model, blk, BorderMode.CONTEXT, Context(ext, a + y, a + x0))
            out[y:y + blk.shape[1], x0:x0 + blk.shape[2]] = res[0]
    return _to_samples(out)


def network_frame(model: Model, rec: Frame, block: Optional[int] = None, border=BorderMode.ZERO) -> Frame:
    """Filter every plane with the (luma-trained) model."""
    planes = []
    for i, p in enumerate(rec.planes):
        if block is None:
            planes.append(network_plane(model, p))
        else:
            planes.append(network_plane_blocks(model, p, block if i == 0 else block // 2, border))
    return Frame(tuple(planes), qp=rec.qp)


def _plane_ctu(ctu: int, index: int) -> int:
    return ctu if index == 0 else ctu // 2


def encode_control(
    mode: str,
    rec: Frame,
    filtered: Frame,
    orig: Frame,
    ctu: int = 64,
    rm_bits: int = 5,
) -> Tuple[Frame, bytes]:
    """Choose the per-frame control and return ``(output, side information)``."""
    if mode == "none":
        return rec, b""
    if mode == "cnn":
        return filtered, b""
    if mode == "cnn+rm":
        idx = [rdo_search(x, f, o, rm_bits) for x, f, o in zip(rec.planes, filtered.planes, orig.planes)]
        params = RmParams(tuple(idx + [0] * (3 - len(idx))), rm_bits)
        side = serialize_rm(params)
        return decode_control(mode, rec, filtered, side, ctu, rm_bits), side
    if mode == "cnn+frame-control":
        bits = 0
        for i, (x, f, o) in enumerate(zip(rec.planes, filtered.planes, orig.planes)):
            bits |= int(frame_control(x, f, o)) << i
        side = bytes([bits])
        return decode_control(mode, rec, filtered, side, ctu, rm_bits), side
    if mode == "cnn+ctu-control":
        flags = [
            ctu_control(x, f, o, _plane_ctu(ctu, i))[0].ravel()
            for i, (x, f, o) in enumerate(zip(rec.planes, filtered.planes, orig.planes))
        ]
        side = np.packbits(np.concatenate(flags).astype(np.uint8)).tobytes()
        return decode_control(mode, rec, filtered, side, ctu, rm_bits), side
    raise ValueError(f"unknown filter mode {mode!r}")


def decode_control(
    mode: str,
    rec: Frame,
    filtered: Frame,
    side: bytes,
    ctu: int = 64,
    rm_bits: int = 5,
) -> Frame:
    if mode == "none":
        return rec
    if mode == "cnn":
        return filtered
    if mode == "cnn+rm":
        params = deserialize_rm(side, rm_bits)
        planes = tuple(
            rm_apply(x, residual_learned(f, x), lambda_from_index(i, rm_bits))
            for x, f, i in zip(rec.planes, filtered.planes, params.indices)
        )
        return Frame(planes, qp=rec.qp)
    if mode == "cnn+frame-control":
        bits = side[0]
        planes = tuple(f if bits >> i & 1 else x for i, (x, f) in enumerate(zip(rec.planes, filtered.planes)))
        return Frame(planes, qp=rec.qp)
    if mode == "cnn+ctu-control":
        flat = np.unpackbits(np.frombuffer(side, np.uint8)).astype(bool)
        planes, pos = [], 0
        for i, (x, f) in enumerate(zip(rec.planes, filtered.planes)):
            grid = ctu_grid(*x.shape, _plane_ctu(ctu, i))
            n = grid[0] * grid[1]
            planes.append(ctu_compose(x, f, flat[pos:pos + n].reshape(grid), _plane_ctu(ctu, i)))
            pos += n
        return Frame(tuple(planes), qp=rec.qp)
    raise ValueError(f"unknown filter mode {mode!r}")


def side_info_bits(mode: str, frame: Frame, ctu: int = 64, rm_bits: int = 5) -> int:
    """Bits charged to the rate for one frame's side information."""
    if mode in ("none", "cnn"):
        return 0
    if mode == "cnn+rm":
        return 3 * rm_bits
    if mode == "cnn+frame-control":
        return len(frame.planes)
    if mode == "cnn+ctu-control":
        total = 0
        for i, p in enumerate(frame.planes):
            rows, cols = ctu_grid(*p.shape, _plane_ctu(ctu, i))
            total += rows * cols
        return total
    raise ValueError(f"unknown filter mode {mode!r}")
