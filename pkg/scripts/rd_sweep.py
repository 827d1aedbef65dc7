"""Rate-distortion sweep of the filter control modes on synthetic content.

Encodes frames with the toy codec at QPs 22/27/32/37, applies each control
mode with the given weights, and prints BD-rate against the unfiltered
anchor. Side information is charged to the rate.

    python scripts/rd_sweep.py --weights runs/desk/student.dscf
"""

import argparse

import numpy as np

from dscloop.codec import RdPoint, bd_rate, estimate_bits, psnr, synthetic_frame, toy_analyze, toy_decode
from dscloop.filtering import encode_control, network_frame, side_info_bits
from dscloop.io import load_weights

QPS = (22, 27, 32, 37)
MODES = ("cnn", "cnn+rm", "cnn+frame-control", "cnn+ctu-control")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--weights", required=True)
    ap.add_argument("--frames", type=int, default=3)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=200)
    args = ap.parse_args()
    model = load_weights(args.weights)
    origs = [synthetic_frame(args.size, args.size, seed=args.seed + i, chroma=True) for i in range(args.frames)]

    anchor, curves = [], {m: [] for m in MODES}
    for qp in QPS:
        streams = [toy_analyze(f, qp) for f in origs]
        recs = [toy_decode(bs) for bs in streams]
        bits = sum(estimate_bits(l) for bs in streams for l in bs.levels)
        anchor.append(RdPoint(bits, float(np.mean([psnr(r, o) for r, o in zip(recs, origs)]))))
        filt_full = [network_frame(model, r) for r in recs]
        filt_ctu = [network_frame(model, r, block=64) for r in recs]
        for mode in MODES:
            filt = filt_ctu if mode == "cnn+ctu-control" else filt_full
            outs = [encode_control(mode, r, f, o)[0] for r, f, o in zip(recs, filt, origs)]
            side = sum(side_info_bits(mode, o) for o in outs)
            curves[mode].append(RdPoint(bits + side, float(np.mean([psnr(x, o) for x, o in zip(outs, origs)]))))
        print(f"qp={qp} anchor {anchor[-1].psnr:.3f} dB " + " ".join(
            f"{m}={curves[m][-1].psnr:.3f}" for m in MODES))
    for mode in MODES:
        print(f"BD-rate {mode:>18}: {bd_rate(anchor, curves[mode]):+.3f}%")


if __name__ == "__main__":
    main()
