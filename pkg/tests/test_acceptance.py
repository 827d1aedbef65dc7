"""Acceptance criteria, one test each, at the stated tolerances.

Each test prints a single ``[ACCEPT n] PASS|FAIL ...`` line (visible with
``pytest -s`` and in the summary via ``-rA``).
"""

import json
import math

import numpy as np
import pytest

from dscloop.cli import main
from dscloop.codec import (
    RdPoint,
    bd_rate,
    padding_impact_block,
    padding_impact_frame,
    synthetic_frame,
)
from dscloop.desk import DeskConfig, run
from dscloop.io import save_weights, write_frames
from dscloop.network import (
    BNParams,
    DscLayer,
    Model,
    build_student,
    cast_model,
    dsc_layer_forward,
    dsc_macs,
    dsc_to_std_ratio,
    flops_count,
    fold_bn,
    forward,
    macs_per_pixel,
    param_count,
    standard_macs,
)
from dscloop.rm import RmParams, deserialize_rm, rdo_search, residual_learned, rm_apply, serialize_rm
from dscloop.tensor import (
    BorderMode,
    Context,
    DepthwiseKernel,
    OpRecord,
    PointwiseKernel,
    StandardKernel,
    backward,
    batch_norm,
    conv2d_depthwise,
    conv2d_pointwise,
    conv2d_standard,
    relu,
)
from oracles import bd_rate_trapezoid, border_marked, central_diff, rel_err


def report(n, ok, detail):
    print(f"\n[ACCEPT {n}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def _sse(a, b):
    d = np.asarray(a, float) - np.asarray(b, float)
    return float((d * d).sum())


# 1 ---------------------------------------------------------------------------------


def test_accept_01_parameter_accounting():
    pc = param_count(fold_bn(build_student(0)))
    ok = pc.total == 11_114 and pc.blocks == (2761, 4032, 4032, 289)
    report(1, ok, f"params={pc.total} blocks={pc.blocks}")


# 2 ---------------------------------------------------------------------------------


def test_accept_02_mac_accounting():
    m = fold_bn(build_student(0))
    # independent per-layer sum: depthwise 9*C_in, pointwise C_in*C_out, final 9*C_in*C_out
    oracle = 9 * 1 + 1 * 32
    for _ in range(8):
        oracle += 9 * 32 + 32 * 32
    oracle += 9 * 32 * 1
    macs = flops_count(m, 1280, 720)
    ok = macs_per_pixel(m) == oracle == 10_825 and 9.5e9 <= macs <= 11.6e9
    report(2, ok, f"per_pixel={macs_per_pixel(m)} oracle={oracle} macs_720p={macs / 1e9:.3f}G")


# 3 ---------------------------------------------------------------------------------


def _random_bn_student(rng, dtype):
    """Random student whose BN statistics look trained: each layer's mean/var
    are measured on a calibration input (then jittered), as running averages
    would be, so activations stay in a realistic range through all layers."""
    m = build_student(int(rng.integers(1 << 30)), np.float64)
    x = rng.random((4, 1, 32, 32))
    layers = []
    for layer in m.layers:
        c = layer.bn.channels
        pw = PointwiseKernel(layer.pointwise.weight, rng.normal(0, 0.1, c))
        y = conv2d_pointwise(conv2d_depthwise(x, layer.depthwise), pw)
        bn = BNParams(
            rng.uniform(0.5, 1.5, c),
            rng.normal(0, 0.3, c),
            y.mean(axis=(0, 2, 3)) + rng.normal(0, 0.05, c),
            y.var(axis=(0, 2, 3)) * rng.uniform(0.8, 1.25, c),
        )
        layer = DscLayer(layer.depthwise, pw, bn)
        x = dsc_layer_forward(layer, x)
        layers.append(layer)
    final = StandardKernel(rng.normal(0, 0.01, m.final.weight.shape), m.final.bias)
    return cast_model(Model(tuple(layers), final, m.config), dtype)


def test_accept_03_bn_fold_equivalence():
    rng = np.random.default_rng(3)
    worst = {np.float32: 0.0, np.float64: 0.0}
    scale = 0.0
    for dtype in worst:
        for _ in range(100):
            m = _random_bn_student(rng, dtype)
            x = rng.random((1, 64, 64)).astype(dtype)
            d = np.abs(forward(fold_bn(m), x).astype(np.float64) - forward(m, x)).max()
            worst[dtype] = max(worst[dtype], float(d))
            scale = max(scale, float(np.abs(forward(m, x) - x).max()))
    ok = worst[np.float32] <= 1e-5 and worst[np.float64] <= 1e-10
    report(3, ok, f"max|diff| single={worst[np.float32]:.3g} double={worst[np.float64]:.3g} (max |residual| {scale:.3g})")


# 4 ---------------------------------------------------------------------------------


def test_accept_04_dsc_ratio():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        c_in, c_out = (int(v) for v in rng.integers(1, 257, 2))
        empirical = dsc_macs(c_in, c_out) / standard_macs(c_in, c_out)
        worst = max(worst, abs(empirical - (1 / c_out + 1 / 9)))
        worst = max(worst, abs(empirical - dsc_to_std_ratio(c_out)))
    one = dsc_to_std_ratio(1)
    ok = worst <= 1e-12 and abs(one - 10 / 9) <= 1e-15
    report(4, ok, f"max|err|={worst:.3g} ratio(C_O=1)={one!r}")


# 5 ---------------------------------------------------------------------------------


def test_accept_05_padding_formulas():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(20):
        w, h = (int(v) for v in rng.integers(3, 80, 2))
        a = int(rng.integers(0, (min(w, h) - 1) // 2 + 1))
        if not math.isclose(padding_impact_frame(w, h, a) * w * h, border_marked(w, h, a), abs_tol=1e-9):
            mismatches += 1
        hb = int(rng.integers(1, 80))
        ab = int(rng.integers(0, hb // 2 + 1))
        exact, _ = padding_impact_block(hb, ab)
        if not math.isclose(exact * hb * hb, border_marked(hb, hb, ab), abs_tol=1e-9):
            mismatches += 1
    hd = padding_impact_frame(1920, 1080, 10)
    ok = mismatches == 0 and abs(hd - 0.0287) < 5e-5
    report(5, ok, f"oracle mismatches={mismatches} p_fc(1080p,a=10)={100 * hd:.2f}%")


# 6 ---------------------------------------------------------------------------------


def test_accept_06_rm_dominance_and_exhaustive_search():
    rng = np.random.default_rng(6)
    bad_dom = bad_sweep = 0
    for _ in range(50):
        shape = tuple(int(v) for v in rng.integers(8, 40, 2))
        orig = rng.integers(0, 256, shape)
        rec = np.clip(orig + rng.integers(-20, 21, shape), 0, 255)
        filt = np.clip(rec + (orig - rec) * rng.uniform(-1, 2) + rng.normal(0, 4, shape), 0, 255).round()
        best = rdo_search(rec, filt, orig)
        r_s = residual_learned(filt, rec)
        sweep = [_sse(rm_apply(rec, r_s, i / 31), orig) for i in range(32)]
        bad_sweep += best != int(np.argmin(sweep))
        bad_dom += sweep[best] > min(_sse(rec, orig), _sse(filt, orig))
    report(6, bad_dom == 0 and bad_sweep == 0, f"dominance failures={bad_dom} sweep mismatches={bad_sweep}")


# 7 ---------------------------------------------------------------------------------


def _grad_errors(fwd, rec_fn, x, params, rng):
    g = rng.standard_normal(fwd(x, *params).shape)
    grads = backward(rec_fn(x, *params), g)
    errs = [rel_err(grads.x, central_diff(lambda v: float((g * fwd(v, *params)).sum()), x))]
    analytic = [grads.weight, grads.bias]
    for j, p in enumerate(params):
        def f(v, j=j):
            ps = list(params)
            ps[j] = v
            return float((g * fwd(x, *ps)).sum())

        errs.append(rel_err(analytic[j], central_diff(f, p)))
    return max(errs)


def _layer_cases(rng):
    frame = rng.standard_normal((2, 9, 9))
    ctx = Context(frame, 2, 2)

    def std(x, w, b):
        return conv2d_standard(x, StandardKernel(w, b))

    def std_ctx(x, w, b):
        return conv2d_standard(x, StandardKernel(w, b), BorderMode.CONTEXT, ctx)

    def bn_train(x, gm, bt):
        return batch_norm(x, gm, bt, eps=1e-3, training=True)[0]

    def bn_train_rec(x, gm, bt):
        _, m, v = batch_norm(x, gm, bt, eps=1e-3, training=True)
        return OpRecord("bn_train", x, params=(gm, bt, m, v, 1e-3))

    mean, var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    return {
        "standard": (
            std,
            lambda x, w, b: OpRecord("standard", x, StandardKernel(w, b)),
            lambda: (rng.standard_normal((2, 2, 5, 4)), [rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]),
        ),
        "standard-context": (
            std_ctx,
            lambda x, w, b: OpRecord("standard", x, StandardKernel(w, b), BorderMode.CONTEXT, ctx),
            lambda: (frame[:, 2:7, 2:6].copy(), [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2)]),
        ),
        "depthwise": (
            lambda x, w: conv2d_depthwise(x, DepthwiseKernel(w)),
            lambda x, w: OpRecord("depthwise", x, DepthwiseKernel(w)),
            lambda: (rng.standard_normal((2, 3, 5, 5)), [rng.standard_normal((3, 3, 3))]),
        ),
        "pointwise": (
            lambda x, w, b: conv2d_pointwise(x, PointwiseKernel(w, b)),
            lambda x, w, b: OpRecord("pointwise", x, PointwiseKernel(w, b)),
            lambda: (rng.standard_normal((2, 3, 4, 4)), [rng.standard_normal((4, 3)), rng.standard_normal(4)]),
        ),
        "relu": (
            lambda x: relu(x),
            lambda x: OpRecord("relu", x),
            # keep samples away from the kink so differences are well defined
            lambda: (np.sign(z := rng.standard_normal((2, 3, 4, 4))) * (np.abs(z) + 0.1), []),
        ),
        "bn-train": (
            bn_train,
            bn_train_rec,
            lambda: (rng.standard_normal((3, 3, 4, 4)), [rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        ),
        "bn-eval": (
            lambda x, gm, bt: batch_norm(x, gm, bt, mean, var, 1e-3),
            lambda x, gm, bt: OpRecord("bn_eval", x, params=(gm, bt, mean, var, 1e-3)),
            lambda: (rng.standard_normal((2, 3, 4, 4)), [rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        ),
    }


def test_accept_07_gradients():
    rng = np.random.default_rng(7)
    worst = {}
    for name, (fwd, rec_fn, make) in _layer_cases(rng).items():
        worst[name] = max(_grad_errors(fwd, rec_fn, *make(), rng) for _ in range(10))
    ok = all(v <= 1e-4 for v in worst.values())
    report(7, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()))


# 8 / 9 -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk():
    return run(DeskConfig())


@pytest.mark.slow
def test_accept_08_desk_training_gain(desk):
    gains = ", ".join(f"{g:+.3f}" for g in desk.gains)
    report(8, desk.mean_gain >= 0.1, f"mean validation gain {desk.mean_gain:+.3f} dB (per frame {gains})")


@pytest.mark.slow
def test_accept_09_transfer_init_ordering(desk):
    a, b = desk.train.ls_phase3_start, desk.train.ls_initial
    report(9, a <= b, f"L_S after AT init={a:.6f} random init={b:.6f}")


# 10 ---------------------------------------------------------------------------------


def test_accept_10_bd_rate():
    anchor = [RdPoint(r, q) for r, q in zip([1000, 1800, 3200, 6000], [30.0, 33.1, 36.0, 39.2])]
    same = bd_rate(anchor, anchor)
    scaled = bd_rate(anchor, [RdPoint(0.9 * p.rate, p.psnr) for p in anchor])
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        q = np.sort(rng.uniform(28, 42, 4))
        r = np.sort(rng.uniform(500, 9000, 4))
        qt = np.sort(q + rng.normal(0, 0.4, 4))
        rt = np.sort(r * rng.uniform(0.8, 1.2, 4))
        a = [RdPoint(x, y) for x, y in zip(r, q)]
        t = [RdPoint(x, y) for x, y in zip(rt, qt)]
        worst = max(worst, abs(bd_rate(a, t) - bd_rate_trapezoid(a, t)))
    ok = same == 0.0 and abs(scaled + 10) <= 0.1 and worst <= 0.05
    report(10, ok, f"identical={same} scaled={scaled:.4f}% oracle max|diff|={worst:.2e}")


# 11 ---------------------------------------------------------------------------------


def test_accept_11_bit_exact_syntax(tmp_path):
    bad = 0
    for y in range(32):
        for u in range(32):
            for v in range(32):
                p = RmParams((y, u, v))
                bad += deserialize_rm(serialize_rm(p)) != p
    write_frames(tmp_path / "eval.yuv", [synthetic_frame(48, 56, seed=s, chroma=True) for s in range(2)])
    save_weights(tmp_path / "w.dscf", fold_bn(build_student(11)))
    cfg = {"data": {"eval": ["eval.yuv"]}, "weights": "w.dscf", "output": {"dir": "out"}}
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    args = ["--config", str(tmp_path / "run.json")]
    codes = (main(["filter", *args, "--mode", "cnn+rm", "--qp", "37"]), main(["filter", *args, "--decode"]))
    out = tmp_path / "out"
    identical = (out / "filtered.yuv").read_bytes() == (out / "decoded.yuv").read_bytes()
    ok = bad == 0 and codes == (0, 0) and identical
    report(11, ok, f"round-trip failures={bad}/32768 cli exit={codes} encoder==decoder={identical}")
