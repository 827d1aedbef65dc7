"""Slow reference implementations used only by the tests."""

import math

import numpy as np


def direct_conv3x3(x, w, b=None, pad=None):
    """Scalar-loop 3x3 convolution of a (C, H, W) input with (O, C, 3, 3) weights.

    ``pad`` is an optional (C, H+2, W+2) padded input; zeros otherwise.
    """
    c_in, h, wd = x.shape
    if pad is None:
        pad = np.zeros((c_in, h + 2, wd + 2))
        pad[:, 1:-1, 1:-1] = x
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for y in range(h):
            for xx in range(wd):
                acc = 0.0 if b is None else float(b[o])
                for c in range(c_in):
                    for dy in range(3):
                        for dx in range(3):
                            acc += w[o, c, dy, dx] * pad[c, y + dy, xx + dx]
                out[o, y, xx] = acc
    return out


def direct_depthwise(x, w):
    out = np.zeros(x.shape)
    for c in range(x.shape[0]):
        out[c] = direct_conv3x3(x[c:c + 1], w[c][None, None])[0]
    return out


def central_diff(f, x, step=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f(x)
        x[i] = old - step
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def naive_dct2(block):
    """O(N^4) orthonormal 2-D DCT-II straight from the definition."""
    n = block.shape[0]
    out = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            au = math.sqrt(1 / n) if u == 0 else math.sqrt(2 / n)
            av = math.sqrt(1 / n) if v == 0 else math.sqrt(2 / n)
            s = 0.0
            for i in range(n):
                for j in range(n):
                    s += (
                        block[i, j]
                        * math.cos(math.pi * (2 * i + 1) * u / (2 * n))
                        * math.cos(math.pi * (2 * j + 1) * v / (2 * n))
                    )
            out[u, v] = au * av * s
    return out


def border_marked(width, height, a):
    """Count pixels within ``a`` of the frame edge by marking them one by one."""
    marked = np.zeros((height, width), bool)
    for y in range(height):
        for x in range(width):
            if y < a or x < a or y >= height - a or x >= width - a:
                marked[y, x] = True
    return int(marked.sum())


def bd_rate_trapezoid(anchor, test, samples=200_001):
    """BD-rate by least-squares cubic (Vandermonde solve) and trapezoid integration."""

    def fit(points):
        q = np.array([p.psnr for p in points])
        r = np.log([p.rate for p in points])
        v = np.vander(q, 4)
        coef, *_ = np.linalg.lstsq(v, r, rcond=None)
        return q, coef

    qa, ca = fit(anchor)
    qt, ct = fit(test)
    lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    grid = np.linspace(lo, hi, samples)
    ya = np.vander(grid, 4) @ ca
    yt = np.vander(grid, 4) @ ct
    dx = grid[1] - grid[0]
    area = lambda y: dx * (y.sum() - 0.5 * (y[0] + y[-1]))
    return (math.exp((area(yt) - area(ya)) / (hi - lo)) - 1) * 100
