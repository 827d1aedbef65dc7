"""Share of samples whose receptive field crosses a padded border.

Prints the frame-level and block-level tables for a given DSC depth and
checks each entry against direct pixel counting.
"""

import argparse

import numpy as np

from dscloop.codec import padding_impact_block, padding_impact_frame
from dscloop.network import receptive_border


def marked(h, w, a):
    m = np.zeros((h, w), bool)
    m[:a], m[-a:], m[:, :a], m[:, -a:] = True, True, True, True
    return int(m.sum()) if a else 0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depth", type=int, default=9, help="number of DSC layers")
    args = ap.parse_args()
    a = receptive_border(args.depth)
    print(f"border a = {a} samples for {args.depth} DSC layers + final conv")
    print(f"{'frame':>12} {'formula':>9} {'counted':>9}")
    for w, h in [(416, 240), (832, 480), (1280, 720), (1920, 1080), (3840, 2160)]:
        p = padding_impact_frame(w, h, a)
        print(f"{w:>6}x{h:<5} {100 * p:8.3f}% {100 * marked(h, w, a) / (w * h):8.3f}%")
    print(f"{'block':>12} {'exact':>9} {'4a/h':>9} {'counted':>9}")
    for b in (32, 64, 128):
        if a >= b:
            continue
        exact, approx = padding_impact_block(b, a)
        print(f"{b:>6}x{b:<5} {100 * exact:8.3f}% {100 * approx:8.3f}% {100 * marked(b, b, a) / b ** 2:8.3f}%")


if __name__ == "__main__":
    main()
