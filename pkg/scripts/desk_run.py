"""Desk-scale training run: synthetic frames, toy codec at QP 37, 200 patches.

Trains teacher -> AT hint -> student, folds BN, and reports the validation
PSNR change of the folded student against the unfiltered reconstructions.

    python scripts/desk_run.py --out runs/desk
"""

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from dscloop.desk import DeskConfig, run
from dscloop.io import save_weights


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--hint-loss", choices=("at", "mmd"), default="at")
    ap.add_argument("--epochs", type=int, nargs=3, metavar=("N1", "N2", "N3"))
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = DeskConfig()
    tc = replace(cfg.train, seed=args.seed, hint_loss=args.hint_loss)
    if args.epochs:
        tc = replace(tc, n1=args.epochs[0], n2=args.epochs[1], n3=args.epochs[2])
    cfg.train = tc

    t0 = time.time()
    res = run(cfg)
    elapsed = time.time() - t0
    for i, (a, b) in enumerate(zip(res.psnr_rec, res.psnr_filtered)):
        print(f"val frame {i}: {a:.4f} -> {b:.4f} dB ({b - a:+.4f})")
    print(f"mean gain {res.mean_gain:+.4f} dB")
    print(f"L_S random init {res.train.ls_initial:.6f}, after hint {res.train.ls_phase3_start:.6f}")
    print(f"elapsed {elapsed:.1f} s")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        save_weights(args.out / "student.dscf", res.train.student)
        save_weights(args.out / "student_unfolded.dscf", res.train.unfolded)
        summary = {
            "seed": args.seed, "hint_loss": args.hint_loss, "gains_db": res.gains,
            "mean_gain_db": res.mean_gain, "ls_initial": res.train.ls_initial,
            "ls_phase3_start": res.train.ls_phase3_start, "elapsed_s": elapsed,
            "history": res.train.history,
        }
        (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
