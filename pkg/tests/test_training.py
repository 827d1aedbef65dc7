import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dscloop.network import NetworkConfig, build_model, forward
from dscloop.training import (
    AdamState,
    PatchPair,
    QpBand,
    TrainConfig,
    Trainee,
    adam_step,
    at_loss,
    at_loss_grad,
    attention_map,
    chain_backward,
    chain_forward,
    evaluate_mse,
    mmd_loss,
    mmd_loss_grad,
    mmd_target,
    model_to_params,
    mse_loss,
    mse_loss_grad,
    sample_patches,
    train_pipeline,
)
from oracles import central_diff, rel_err

TINY = NetworkConfig(3, 4, True)


# --- bands and config --------------------------------------------------------------


@pytest.mark.parametrize("qp,band", [(22, "low"), (24, "low"), (25, "mid1"), (29, "mid1"),
                                     (30, "mid2"), (34, "mid2"), (35, "high"), (51, "high")])
def test_qp_band_edges(qp, band):
    assert QpBand.from_qp(qp).value == band


def test_band_defaults():
    assert [b.representative_qp for b in QpBand] == [22, 27, 32, 37]
    assert TrainConfig.full_schedule("high").n2 == 20
    assert TrainConfig.full_schedule("low").n2 == 10
    cfg = TrainConfig.full_schedule("mid1", codec="vvc")
    assert (cfg.n1, cfg.n3, cfg.patch) == (50, 50, 64)


@pytest.mark.parametrize("kw", [{"patch": 48}, {"n1": -1}, {"batch": 0}, {"hint_loss": "kd"}, {"band": "x"}])
def test_train_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# --- losses -----------------------------------------------------------------------


def test_mse_loss_examples(rng):
    x = rng.random((3, 1, 4, 4))
    assert mse_loss(x, x) == 0
    assert mse_loss(np.zeros((2, 1, 2, 2)), np.ones((2, 1, 2, 2))) == 4.0  # per-sample SSE
    with pytest.raises(ValueError, match="shape"):
        mse_loss(np.zeros((1, 2)), np.zeros((1, 3)))


def test_mse_grad_matches_fd(rng):
    p, t = rng.random((2, 1, 3, 3)), rng.random((2, 1, 3, 3))
    assert rel_err(mse_loss_grad(p, t), central_diff(lambda v: mse_loss(v, t), p)) <= 1e-6


def test_attention_map_properties(rng):
    f = rng.standard_normal((4, 5, 5))
    a = attention_map(f)
    assert np.sqrt((a * a).sum()) == pytest.approx(1.0)
    np.testing.assert_allclose(attention_map(3 * f), a, atol=1e-12)  # scale free
    z, flag = attention_map(np.zeros((2, 3, 3)), return_flag=True)
    assert flag and not z.any()
    assert at_loss(f, f) == 0.0
    with pytest.raises(ValueError, match="spatial"):
        at_loss(f, np.zeros((4, 5, 6)))


def test_at_channel_count_may_differ(rng):
    assert at_loss(rng.random((8, 4, 4)), rng.random((3, 4, 4))) >= 0


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_at_grad_matches_fd(rng, p):
    target = attention_map(rng.random((6, 4, 4)), p)
    f = rng.standard_normal((3, 4, 4))
    _, g = at_loss_grad(target, f, p)
    assert rel_err(g, central_diff(lambda v: at_loss_grad(target, v, p)[0], f)) <= 1e-4


def test_mmd_properties(rng):
    f = rng.random((4, 3, 3))
    assert mmd_loss(f, f) == 0.0
    f2 = f.copy()
    f2[1] = 0  # zero channel is skipped, not a NaN
    assert np.isfinite(mmd_loss(f, f2))
    np.testing.assert_allclose(mmd_target(f * 5), mmd_target(f), atol=1e-12)


def test_mmd_grad_matches_fd(rng):
    target = mmd_target(rng.random((5, 4, 4)))
    f = rng.standard_normal((3, 4, 4))
    _, g = mmd_loss_grad(target, f)
    assert rel_err(g, central_diff(lambda v: mmd_loss_grad(target, v)[0], f)) <= 1e-4


# --- optimizer ----------------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    params = {"w": np.array([1.0, -1.0, 0.5])}
    grads = {"w": np.array([0.3, -2.0, 0.0])}
    new, state = adam_step(params, grads, AdamState(), lr=0.1)
    np.testing.assert_allclose(new["w"], [0.9, -0.9, 0.5], atol=1e-6)
    assert state.t == 1


def test_adam_leaves_params_without_grads():
    params = {"a": np.ones(2), "b": np.ones(2)}
    new, _ = adam_step(params, {"a": np.ones(2)}, AdamState())
    assert new["b"] is params["b"]
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, {"a": np.ones(3)}, AdamState())


def test_adam_minimizes_quadratic():
    params, state = {"x": np.array([5.0, -3.0])}, AdamState()
    for _ in range(2000):
        params, state = adam_step(params, {"x": 2 * params["x"]}, state, lr=0.05)
    assert np.abs(params["x"]).max() < 1e-2


# --- differentiable chain -------------------------------------------------------------


def _perturbed(rng):
    params, stats = model_to_params(build_model(TINY, 0, np.float64))
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    stats = {k: v + (0.3 if k.endswith("var") else 0.1) * rng.random(v.shape) for k, v in stats.items()}
    return params, stats


@pytest.mark.parametrize("bn_training", [True, False])
def test_chain_gradient_matches_fd(rng, bn_training):
    params, stats = _perturbed(rng)
    x, y = rng.random((3, 1, 5, 5)), rng.random((3, 1, 5, 5))

    def loss(p):
        return mse_loss(chain_forward(p, stats, 3, x, bn_training)[0], y)

    out, cache = chain_forward(params, stats, 3, x, bn_training)
    grads = chain_backward(cache, grad_out=mse_loss_grad(out, y))
    for name in ("dw0", "pw1.w", "bn1.gamma", "bn2.beta", "final.w", "final.b"):
        def f(v, name=name):
            return loss({**params, name: v})

        assert rel_err(grads[name], central_diff(f, params[name], 1e-6)) <= 1e-4, name


def test_chain_hint_gradient_matches_fd(rng):
    params, stats = _perturbed(rng)
    x = rng.random((2, 1, 5, 5))
    target = [attention_map(rng.random((7, 5, 5))) for _ in range(2)]

    def loss(p):
        _, c = chain_forward(p, stats, 3, x, True, stop_after=1, keep=(1,))
        return sum(at_loss_grad(target[b], c.feats[1][b])[0] for b in range(2)) / 2

    _, cache = chain_forward(params, stats, 3, x, True, stop_after=1, keep=(1,))
    fg = np.stack([at_loss_grad(target[b], cache.feats[1][b])[1] for b in range(2)]) / 2
    grads = chain_backward(cache, feat_grads={1: fg})
    assert "final.w" not in grads
    for name in ("dw0", "pw0.w", "bn0.gamma", "pw1.w"):
        num = central_diff(lambda v, name=name: loss({**params, name: v}), params[name], 1e-6)
        assert rel_err(grads[name], num) <= 1e-4, name


def test_eval_chain_matches_network_forward(rng):
    params, stats = _perturbed(rng)
    t = Trainee(params, stats, TINY, 1e-3)
    x = rng.random((2, 1, 6, 6))
    out, _ = t.forward(x, bn_training=False)
    np.testing.assert_allclose(out, forward(t.to_model(np.float64), x), atol=1e-12)


# --- data -------------------------------------------------------------------------


def _pairs(rng, n=2, shape=(40, 48)):
    out = []
    for _ in range(n):
        o = rng.integers(0, 256, shape).astype(np.uint8)
        r = np.clip(o.astype(int) + rng.integers(-5, 6, shape), 0, 255).astype(np.uint8)
        out.append((r, o))
    return out


def test_sample_patches_shape_range_alignment(rng):
    frames = _pairs(rng)
    patches = sample_patches(frames, 32, 20, seed=1)
    assert len(patches) == 20
    for p in patches:
        assert p.rec.shape == p.orig.shape == (1, 32, 32)
        assert 0 <= p.rec.min() and p.rec.max() <= 1
    # every patch is an 8-aligned crop of one of the frames
    p = patches[0]
    hits = [
        (y, x)
        for r, _ in frames
        for y in range(0, 9, 8)
        for x in range(0, 17, 8)
        if np.array_equal(r[y:y + 32, x:x + 32] / 255.0, p.rec[0])
    ]
    assert hits


def test_sample_patches_deterministic_and_errors(rng):
    frames = _pairs(rng)
    a = sample_patches(frames, 32, 5, seed=3)
    b = sample_patches(frames, 32, 5, seed=3)
    assert all(np.array_equal(x.rec, y.rec) for x, y in zip(a, b))
    with pytest.raises(ValueError, match="smaller"):
        sample_patches(_pairs(rng, 1, (16, 64)), 32, 1)
    with pytest.raises(ValueError):
        sample_patches([], 32, 1)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), count=st.integers(1, 6))
def test_sample_patches_count(seed, count):
    frames = _pairs(np.random.default_rng(seed), 1, (33, 35))
    assert len(sample_patches(frames, 32, count, seed)) == count


# --- pipeline ----------------------------------------------------------------------


def _tiny_dataset(rng, n=6):
    pairs = []
    for _ in range(n):
        o = rng.random((1, 32, 32))
        r = np.clip(o + rng.normal(0, 0.05, o.shape), 0, 1)
        pairs.append(PatchPair(r, o))
    return pairs


def _tiny_cfg(**kw):
    base = dict(n1=1, n2=1, n3=1, batch=3, seed=5,
                teacher=NetworkConfig(4, 4), student=NetworkConfig(3, 4))
    base.update(kw)
    return TrainConfig(**base)


def test_pipeline_runs_and_is_deterministic(rng):
    data = _tiny_dataset(rng)
    a = train_pipeline(data, _tiny_cfg())
    b = train_pipeline(data, _tiny_cfg())
    assert a.student.folded and not a.unfolded.folded
    assert [h["phase"] for h in a.history] == ["teacher", "hint-at", "student"]
    np.testing.assert_array_equal(a.student.final.weight, b.student.final.weight)
    assert a.ls_initial == b.ls_initial


def test_pipeline_mmd_and_no_hint(rng):
    data = _tiny_dataset(rng)
    r = train_pipeline(data, _tiny_cfg(hint_loss="mmd"))
    assert r.history[1]["phase"] == "hint-mmd"
    r = train_pipeline(data, _tiny_cfg(n1=0, n2=0))
    assert r.teacher is None and r.ls_initial == r.ls_phase3_start


def test_pipeline_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        train_pipeline([], _tiny_cfg())


def test_evaluate_mse_does_not_update(rng):
    data = _tiny_dataset(rng)
    t = Trainee.from_model(build_model(TINY, 0, np.float64))
    rec = np.stack([p.rec for p in data])
    orig = np.stack([p.orig for p in data])
    before = {k: v.copy() for k, v in t.stats.items()}
    assert evaluate_mse(t, rec, orig, 4) == evaluate_mse(t, rec, orig, 4)
    for k in before:
        np.testing.assert_array_equal(before[k], t.stats[k])
