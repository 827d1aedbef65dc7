"""Command-line entry point: ``dscloop {train,filter,analyze,fold,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import analysis
from .codec import Frame, RdPoint, bd_rate, psnr, toy_analyze, toy_decode, toy_encode, estimate_bits
from .filtering import decode_control, encode_control, network_frame, side_info_bits
from .io import (
    ConfigError,
    DataError,
    RunConfig,
    config_to_dict,
    decode_bitstream,
    decode_side_info,
    encode_bitstream,
    encode_side_info,
    load_config,
    load_weights,
    read_frames,
    save_weights,
    write_frames,
)
from .network import build_student, build_teacher, fold_bn, forward
from .training import QpBand, TrainConfig, sample_patches, train_pipeline

log = logging.getLogger("dscloop")

EVAL_QPS = (22, 27, 32, 37)


def _fmt(x: float) -> float:
    """JSON-safe number: infinite PSNR becomes a large sentinel."""
    return 999.99 if x == float("inf") else round(float(x), 6)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _frames(paths: Sequence[str]) -> List[Frame]:
    if not paths:
        raise DataError("no input frame files configured")
    frames = []
    for p in paths:
        if not Path(p).exists():
            raise DataError(f"missing frame file {p}")
        frames += read_frames(p)
    return frames


def _qp(cfg: RunConfig) -> int:
    return cfg.qp if cfg.qp is not None else QpBand.parse(cfg.band).representative_qp


def _weights_for(cfg: RunConfig, qp: int):
    w = cfg.weights
    if isinstance(w, dict):
        band = QpBand.from_qp(qp).value
        if band not in w:
            raise ConfigError(f"no weight file configured for band {band}")
        w = w[band]
    if not w:
        raise ConfigError("no weight file configured")
    model = load_weights(w)
    if not model.folded:
        log.warning("filtering with an unfolded model (BN evaluated explicitly)")
    return model


# --------------------------------------------------------------------------
# train


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    qp = _qp(cfg)
    origs = _frames(cfg.data.train)
    pairs = [(toy_encode(f, qp)[0].luma, f.luma) for f in origs]
    t = cfg.train
    if t.full_schedule:
        tc = TrainConfig.full_schedule(cfg.band, patch=t.patch, batch=t.batch,
                                        learning_rate=t.learning_rate, seed=cfg.seed,
                                        hint_loss=t.hint_loss, p=t.p)
    else:
        tc = TrainConfig(band=cfg.band, n1=t.n1, n2=t.n2, n3=t.n3, patch=t.patch, batch=t.batch,
                         learning_rate=t.learning_rate, seed=cfg.seed, hint_loss=t.hint_loss, p=t.p)
    patches = sample_patches(pairs, tc.patch, t.patches, seed=cfg.seed)
    with open(out / "loss.log", "w") as fh:
        def on_epoch(e):
            fh.write(f"phase={e['phase']} epoch={e['epoch']} loss={e['loss']:.9g}\n")
            fh.flush()

        res = train_pipeline(patches, tc, on_epoch)
    save_weights(out / "student.dscf", res.student)
    save_weights(out / "student_unfolded.dscf", res.unfolded)
    _write_json(out / "train_summary.json", {
        "band": tc.band.value, "qp": qp, "patches": len(patches), "seed": cfg.seed,
        "epochs": [tc.n1, tc.n2, tc.n3], "hint_loss": tc.hint_loss,
        "ls_initial": res.ls_initial, "ls_phase3_start": res.ls_phase3_start,
        "history": res.history,
    })
    print(f"wrote {out / 'student.dscf'} and {out / 'student_unfolded.dscf'}")
    return 0


# --------------------------------------------------------------------------
# filter


def _filter_frames(cfg, model, recs, origs, mode):
    fc = cfg.filter
    block = fc.ctu if mode == "cnn+ctu-control" else None
    outs, sides, metrics = [], [], []
    for i, (rec, orig) in enumerate(zip(recs, origs)):
        filt = rec if mode == "none" else network_frame(model, rec, block, fc.border)
        out, side = encode_control(mode, rec, filt, orig, fc.ctu, fc.rm_bits)
        outs.append(out)
        sides.append(side)
        m = {"frame": i, "mode": mode, "psnr_rec": _fmt(psnr(rec, orig)), "psnr_out": _fmt(psnr(out, orig))}
        if mode == "cnn+rm":
            m["rm_syntax"] = side.hex()
        metrics.append(m)
    return outs, sides, metrics


def cmd_filter(cfg: RunConfig, decode: bool = False) -> int:
    out = Path(cfg.output.dir)
    fc = cfg.filter
    if decode:
        try:
            streams = decode_bitstream((out / "bitstream.toyb").read_bytes())
            mode, sides = decode_side_info((out / "side.rmsi").read_bytes())
        except OSError as e:
            raise DataError(f"decoder inputs missing in {out}: {e}") from e
        if len(sides) != len(streams):
            raise DataError("side information and bitstream disagree on frame count")
        model = None if mode == "none" else _weights_for(cfg, streams[0].qp)
        frames = []
        for bs, side in zip(streams, sides):
            rec = toy_decode(bs)
            filt = rec if mode == "none" else network_frame(
                model, rec, fc.ctu if mode == "cnn+ctu-control" else None, fc.border)
            frames.append(decode_control(mode, rec, filt, side, fc.ctu, fc.rm_bits))
        write_frames(out / "decoded.yuv", frames)
        print(f"decoded {len(frames)} frame(s) to {out / 'decoded.yuv'}")
        return 0

    out.mkdir(parents=True, exist_ok=True)
    qp = _qp(cfg)
    origs = _frames(cfg.data.eval)
    streams = [toy_analyze(f, qp) for f in origs]
    recs = [toy_decode(bs) for bs in streams]
    model = None if fc.mode == "none" else _weights_for(cfg, qp)
    outs, sides, metrics = _filter_frames(cfg, model, recs, origs, fc.mode)
    write_frames(out / "filtered.yuv", outs)
    (out / "bitstream.toyb").write_bytes(encode_bitstream(streams))
    (out / "side.rmsi").write_bytes(encode_side_info(fc.mode, sides))
    with open(out / "metrics.jsonl", "w") as fh:
        for m in metrics:
            fh.write(json.dumps(m, sort_keys=True) + "\n")
    _write_json(out / "filter_summary.json", {
        "mode": fc.mode, "qp": qp, "frames": len(outs),
        "mean_psnr_rec": _fmt(np.mean([m["psnr_rec"] for m in metrics])),
        "mean_psnr_out": _fmt(np.mean([m["psnr_out"] for m in metrics])),
    })
    for m in metrics:
        print(f"frame={m['frame']} psnr_rec={m['psnr_rec']:.4f} psnr_out={m['psnr_out']:.4f}")
    return 0


# --------------------------------------------------------------------------
# analyze / fold


def cmd_analyze(args) -> int:
    if args.weights:
        model = load_weights(args.weights)
        if not model.folded:
            model = fold_bn(model)
    else:
        model = fold_bn(build_teacher(0) if args.model == "teacher" else build_student(0))
    report = analysis.report(model, args.width, args.height, args.ctu)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(analysis.format_report(report))
    return 0


def cmd_fold(args) -> int:
    model = load_weights(args.weights)
    if model.folded:
        raise DataError(f"{args.weights} is already folded")
    folded = fold_bn(model)
    rng = np.random.default_rng(args.seed)
    probe = rng.random((1, 64, 64)).astype(np.float32)
    diff = float(np.abs(forward(folded, probe) - forward(model, probe)).max())
    out = Path(args.out) if args.out else Path(args.weights).with_name(Path(args.weights).stem + "_folded.dscf")
    save_weights(out, folded)
    print(f"wrote {out} (probe max abs diff {diff:.3g})")
    if diff > 1e-4:
        raise DataError(f"folded model disagrees with the original on the probe ({diff:.3g})")
    return 0


# --------------------------------------------------------------------------
# eval


def cmd_eval(cfg: RunConfig) -> int:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    origs = _frames(cfg.data.eval)
    fc = cfg.filter
    anchor, test, rows = [], [], []
    for qp in EVAL_QPS:
        streams = [toy_analyze(f, qp) for f in origs]
        recs = [toy_decode(bs) for bs in streams]
        bits = sum(estimate_bits(l) for bs in streams for l in bs.levels)
        model = None if fc.mode == "none" else _weights_for(cfg, qp)
        outs, sides, _ = _filter_frames(cfg, model, recs, origs, fc.mode)
        side_bits = sum(side_info_bits(fc.mode, f, fc.ctu, fc.rm_bits) for f in outs)
        pa = float(np.mean([psnr(r, o) for r, o in zip(recs, origs)]))
        pt = float(np.mean([psnr(r, o) for r, o in zip(outs, origs)]))
        anchor.append(RdPoint(bits, pa))
        test.append(RdPoint(bits + side_bits, pt))
        rows.append({"qp": qp, "anchor_bits": bits, "anchor_psnr": _fmt(pa),
                     "test_bits": bits + side_bits, "test_psnr": _fmt(pt)})
        print(f"qp={qp} bits={bits:.1f} psnr_anchor={pa:.4f} psnr_test={pt:.4f} side_bits={side_bits}")
    bd = bd_rate(anchor, test)
    print(f"bd_rate={bd:.4f}%")
    _write_json(out / "eval_summary.json", {"mode": fc.mode, "points": rows, "bd_rate_percent": round(bd, 6)})
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dscloop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_args(p, mode=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--qp", type=int)
        p.add_argument("--out", help="output directory")
        if mode:
            p.add_argument("--mode", help="filter mode: none | cnn | cnn+rm | cnn+frame-control | cnn+ctu-control")

    run_args(sub.add_parser("train", help="run the teacher/hint/student pipeline"), mode=False)
    p = sub.add_parser("filter", help="encode, filter and write frames + side information")
    run_args(p)
    p.add_argument("--decode", action="store_true", help="decoder mode: rebuild frames from bitstream + side info")
    run_args(sub.add_parser("eval", help="RD sweep over QPs 22/27/32/37 and BD-rate vs no filter"))

    p = sub.add_parser("analyze", help="parameter / MAC / padding report")
    p.add_argument("--weights")
    p.add_argument("--model", choices=("student", "teacher"), default="student")
    p.add_argument("--width", type=int, default=1280)
    p.add_argument("--height", type=int, default=720)
    p.add_argument("--ctu", type=int, default=64)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("fold", help="merge BN into the pointwise convolutions")
    p.add_argument("--weights", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s %(message)s",
    )
    try:
        if args.command == "analyze":
            return cmd_analyze(args)
        if args.command == "fold":
            return cmd_fold(args)
        overrides = {"seed": args.seed, "qp": args.qp, "out": args.out, "mode": getattr(args, "mode", None)}
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "filter":
            return cmd_filter(cfg, decode=args.decode)
        if args.command == "eval":
            return cmd_eval(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    return 2


if __name__ == "__main__":
    sys.exit(main())
