"""On-disk formats: weight files, raw planar frames, toy bitstreams, run config.

Weight file (little-endian)::

    magic "DSCF" | u16 version | u8 flags (bit0 = folded) | u8 0
    u16 K | u16 F | u32 payload bytes | payload (f32...) | u32 crc32(payload)

Payload, per DSC layer: depthwise (C_in*9), pointwise weight (F*C_in),
pointwise bias (F), and unless folded: gamma, beta, mean, var (F each) and
eps (1). Then the final conv weight (F*9) and bias (1).
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .codec import Frame, ToyBitstream
from .network import BNParams, DscLayer, Model, NetworkConfig
from .tensor import DepthwiseKernel, PointwiseKernel, StandardKernel

MAGIC = b"DSCF"
VERSION = 1
_HEADER = struct.Struct("<4sHBBHHI")
_F32 = np.dtype("<f4")


class ConfigError(Exception):
    """Bad configuration or arguments (CLI exit code 2)."""


class DataError(Exception):
    """Missing or malformed input data (CLI exit code 3)."""


# --------------------------------------------------------------------------
# weights


def encode_weights(model: Model) -> bytes:
    folded = model.folded
    if not folded and any(layer.bn is None for layer in model.layers):
        raise ValueError("model mixes folded and unfolded layers")
    parts = []
    for layer in model.layers:
        parts += [layer.depthwise.weight, layer.pointwise.weight, layer.pointwise.bias]
        if not folded:
            bn = layer.bn
            parts += [bn.gamma, bn.beta, bn.mean, bn.var, np.array([bn.eps])]
    parts += [model.final.weight, model.final.bias]
    payload = b"".join(np.asarray(p, dtype=_F32).ravel().tobytes() for p in parts)
    cfg = model.config
    header = _HEADER.pack(MAGIC, VERSION, int(folded), 0, cfg.num_dsc_layers, cfg.feature_maps, len(payload))
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_weights(blob: bytes) -> Model:
    if len(blob) < _HEADER.size + 4:
        raise DataError("weight file truncated")
    magic, version, flags, _, k, f, size = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError("not a DSCF weight file")
    if version != VERSION:
        raise DataError(f"unsupported weight file version {version}")
    if len(blob) != _HEADER.size + size + 4:
        raise DataError("weight file length does not match its header")
    payload = blob[_HEADER.size:_HEADER.size + size]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + size)
    if crc != zlib.crc32(payload):
        raise DataError("weight file checksum mismatch")
    folded = bool(flags & 1)
    values = np.frombuffer(payload, dtype=_F32).astype(np.float32)
    pos = 0

    def take(*shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + n > values.size:
            raise DataError("weight payload shorter than its config implies")
        out = values[pos:pos + n].reshape(shape).copy()
        pos += n
        return out

    layers = []
    c_in = 1
    for _ in range(k):
        dw = DepthwiseKernel(take(c_in, 3, 3))
        pw = PointwiseKernel(take(f, c_in), take(f))
        bn = None
        if not folded:
            gamma, beta, mean, var = take(f), take(f), take(f), take(f)
            bn = BNParams(gamma, beta, mean, var, float(take(1)[0]))
        layers.append(DscLayer(dw, pw, bn))
        c_in = f
    final = StandardKernel(take(1, f, 3, 3), take(1))
    if pos != values.size:
        raise DataError("weight payload longer than its config implies")
    return Model(tuple(layers), final, NetworkConfig(k, f, not folded))


def save_weights(path, model: Model) -> None:
    Path(path).write_bytes(encode_weights(model))


def load_weights(path) -> Model:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read weight file {path}: {e}") from e
    return decode_weights(blob)


# --------------------------------------------------------------------------
# raw planar frames with a JSON sidecar


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_frames(path, frames: Sequence[Frame]) -> None:
    if not frames:
        raise ValueError("no frames to write")
    first = frames[0]
    for fr in frames:
        if not fr.same_layout(first):
            raise ValueError("all frames in a file must share a layout")
    with open(path, "wb") as fh:
        for fr in frames:
            for p in fr.planes:
                fh.write(np.ascontiguousarray(p, np.uint8).tobytes())
    meta = {"width": first.width, "height": first.height, "planes": len(first.planes), "frames": len(frames)}
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_frames(path, width: Optional[int] = None, height: Optional[int] = None, planes: Optional[int] = None) -> List[Frame]:
    """Read 8-bit planar frames; geometry from arguments or the ``.json`` sidecar."""
    path = Path(path)
    meta = {}
    if sidecar_path(path).exists():
        try:
            meta = json.loads(sidecar_path(path).read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"bad sidecar for {path}: {e}") from e
    width = width or meta.get("width")
    height = height or meta.get("height")
    planes = planes or meta.get("planes", 1)
    if not width or not height:
        raise DataError(f"{path}: frame geometry unknown (no sidecar and no width/height)")
    if planes not in (1, 3):
        raise DataError(f"{path}: planes must be 1 or 3")
    try:
        data = np.fromfile(path, dtype=np.uint8)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    shapes = [(height, width)]
    if planes == 3:
        shapes += [((height + 1) // 2, (width + 1) // 2)] * 2
    per_frame = sum(h * w for h, w in shapes)
    if data.size == 0 or data.size % per_frame:
        raise DataError(f"{path}: size {data.size} is not a multiple of the frame size {per_frame}")
    frames = []
    for i in range(data.size // per_frame):
        pos = i * per_frame
        ps = []
        for h, w in shapes:
            ps.append(data[pos:pos + h * w].reshape(h, w))
            pos += h * w
        frames.append(Frame(tuple(ps)))
    return frames


# --------------------------------------------------------------------------
# toy bitstream and per-frame side information

_BS_MAGIC = b"TOYB"
_SI_MAGIC = b"RMSI"


def encode_bitstream(streams: Sequence[ToyBitstream]) -> bytes:
    out = [_BS_MAGIC, struct.pack("<I", len(streams))]
    for bs in streams:
        out.append(struct.pack("<BB", bs.qp, len(bs.levels)))
        for lv, (h, w) in zip(bs.levels, bs.shapes):
            out.append(struct.pack("<HH", h, w))
            out.append(np.asarray(lv, "<i2").tobytes())
    return b"".join(out)


def decode_bitstream(blob: bytes) -> List[ToyBitstream]:
    if blob[:4] != _BS_MAGIC:
        raise DataError("not a toy bitstream")
    (n,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    streams = []
    try:
        for _ in range(n):
            qp, nplanes = struct.unpack_from("<BB", blob, pos)
            pos += 2
            levels, shapes = [], []
            for _ in range(nplanes):
                h, w = struct.unpack_from("<HH", blob, pos)
                pos += 4
                rows, cols = -(-h // 8), -(-w // 8)
                count = rows * cols * 64
                lv = np.frombuffer(blob, "<i2", count, pos).astype(np.int32).reshape(rows, cols, 8, 8)
                pos += 2 * count
                levels.append(lv)
                shapes.append((h, w))
            streams.append(ToyBitstream(tuple(levels), tuple(shapes), qp))
    except (struct.error, ValueError) as e:
        raise DataError(f"truncated toy bitstream: {e}") from e
    if pos != len(blob):
        raise DataError("trailing bytes after toy bitstream")
    return streams


def encode_side_info(mode: str, payloads: Sequence[bytes]) -> bytes:
    name = mode.encode()
    out = [_SI_MAGIC, struct.pack("<B", len(name)), name, struct.pack("<I", len(payloads))]
    for p in payloads:
        out += [struct.pack("<H", len(p)), p]
    return b"".join(out)


def decode_side_info(blob: bytes) -> Tuple[str, List[bytes]]:
    if blob[:4] != _SI_MAGIC:
        raise DataError("not a side-information file")
    try:
        (nlen,) = struct.unpack_from("<B", blob, 4)
        mode = blob[5:5 + nlen].decode()
        pos = 5 + nlen
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        payloads = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            payloads.append(blob[pos:pos + ln])
            pos += ln
    except (struct.error, UnicodeDecodeError) as e:
        raise DataError(f"truncated side information: {e}") from e
    if pos != len(blob):
        raise DataError("side information length does not match its contents")
    if mode not in FILTER_MODES:
        raise DataError(f"unknown filter mode {mode!r} in side information")
    return mode, payloads


# --------------------------------------------------------------------------
# run configuration

FILTER_MODES = ("none", "cnn", "cnn+rm", "cnn+frame-control", "cnn+ctu-control")


@dataclass
class DataSection:
    train: List[str] = field(default_factory=list)  # raw original frames for training
    eval: List[str] = field(default_factory=list)  # raw original frames for filter/eval


@dataclass
class TrainSection:
    n1: int = 5
    n2: int = 2
    n3: int = 5
    patch: int = 32
    batch: int = 2
    learning_rate: float = 1e-3
    patches: int = 200
    hint_loss: str = "at"
    p: float = 2.0
    full_schedule: bool = False  # n1 = n3 = 50, n2 = 10/20 by band


@dataclass
class FilterSection:
    mode: str = "cnn+rm"
    border: str = "zero"  # zero | context; matters for per-CTU inference
    ctu: int = 64
    rm_bits: int = 5

    def __post_init__(self):
        if self.mode not in FILTER_MODES:
            raise ConfigError(f"filter.mode must be one of {FILTER_MODES}, got {self.mode!r}")
        if self.border not in ("zero", "context"):
            raise ConfigError("filter.border must be 'zero' or 'context'")
        if self.ctu < 8 or self.ctu % 2:
            raise ConfigError("filter.ctu must be an even size >= 8")
        if not 1 <= self.rm_bits <= 8:
            raise ConfigError("filter.rm_bits must be in 1..8")


@dataclass
class OutputSection:
    dir: str = "out"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    band: str = "high"
    qp: Optional[int] = None  # toy-codec QP; defaults to the band's representative QP
    train: TrainSection = field(default_factory=TrainSection)
    filter: FilterSection = field(default_factory=FilterSection)
    weights: Union[None, str, Dict[str, str]] = None  # one file, or band -> file
    seed: int = 0
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        if self.band not in ("low", "mid1", "mid2", "high"):
            raise ConfigError(f"band must be low/mid1/mid2/high, got {self.band!r}")
        if self.qp is not None and not 0 <= self.qp <= 51:
            raise ConfigError("qp must be in [0, 51]")


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kw = {}
    for name, value in raw.items():
        sub = _SECTIONS.get((cls, name))
        kw[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


_SECTIONS = {
    (RunConfig, "data"): DataSection,
    (RunConfig, "train"): TrainSection,
    (RunConfig, "filter"): FilterSection,
    (RunConfig, "output"): OutputSection,
}


def _resolve(base: Path, p: str) -> str:
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read a JSON run config; relative paths resolve against its directory."""
    raw, base = {}, Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        base = path.parent
    cfg = _build(RunConfig, raw, "config")
    cfg.data.train = [_resolve(base, p) for p in cfg.data.train]
    cfg.data.eval = [_resolve(base, p) for p in cfg.data.eval]
    if isinstance(cfg.weights, str):
        cfg.weights = _resolve(base, cfg.weights)
    elif isinstance(cfg.weights, dict):
        cfg.weights = {k: _resolve(base, v) for k, v in cfg.weights.items()}
    if "output" in raw:
        cfg.output.dir = _resolve(base, cfg.output.dir)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "mode":
            cfg.filter = FilterSection(value, cfg.filter.border, cfg.filter.ctu, cfg.filter.rm_bits)
        elif key == "out":
            cfg.output.dir = value
        else:
            setattr(cfg, key, value)
    RunConfig.__post_init__(cfg)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
