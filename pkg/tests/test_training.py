import math

import numpy as np
import pytest

from pa3d.geometry import PatchSet, build_patches, farthest_point_sampling
from pa3d.tensor import Graph, Tensor, backward, check_gradients
from pa3d.training import (
    StageConfig,
    compute_fractional_labels,
    match_patches,
    run_stage,
    stage1_loss,
    stage2_loss,
)

from helpers import micro_model, micro_set
from oracles import nearest_bruteforce, sigmoid_bce_scalar


# ---------------------------------------------------------------------------
# patch matching


def test_match_identical_sets_identity():
    rng = np.random.default_rng(0)
    c = rng.uniform(-1, 1, (8, 3))
    np.testing.assert_array_equal(match_patches(c, c), np.arange(8))


def test_match_single_cached_center():
    rng = np.random.default_rng(1)
    online = rng.uniform(-1, 1, (5, 3))
    cached = np.array([[0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(match_patches(online, cached), np.zeros(5))


def test_match_jittered_vs_bruteforce():
    rng = np.random.default_rng(2)
    cached = rng.uniform(-1, 1, (32, 3))
    online = cached + rng.normal(0, 0.05, cached.shape)
    got = match_patches(online, cached)
    for i in range(32):
        assert got[i] == nearest_bruteforce(online[i], cached)


def test_match_empty_cache_errors():
    with pytest.raises(ValueError):
        match_patches(np.zeros((2, 3)), np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# fractional labels


def _patches(membership):
    membership = np.asarray(membership)
    g, k = membership.shape
    return PatchSet(centers=np.zeros((g, 3)), membership=membership,
                    center_index=membership[:, 0].copy())


def test_fraction_full_patch_is_one():
    labels = [[1]] * 4
    fl = compute_fractional_labels(_patches([[0, 1, 2, 3]]), labels, ["a", "b"])
    np.testing.assert_array_equal(fl.y, [[0.0, 1.0]])


def test_fraction_half_patch():
    labels = [[1], [1], [0], [0]]
    fl = compute_fractional_labels(_patches([[0, 1, 2, 3]]), labels, ["a", "b"])
    np.testing.assert_array_equal(fl.y, [[0.5, 0.5]])


def test_fraction_multilabel_point_counts_everywhere():
    labels = [[0, 1], [2]]
    fl = compute_fractional_labels(_patches([[0, 1]]), labels, ["a", "b", "c"])
    np.testing.assert_array_equal(fl.y, [[0.5, 0.5, 0.5]])


def test_fraction_k_times_y_integral():
    rng = np.random.default_rng(3)
    labels = [[int(rng.integers(0, 3))] for _ in range(12)]
    fl = compute_fractional_labels(
        _patches([[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]]),
        labels, ["a", "b", "c"])
    np.testing.assert_allclose((fl.y * 4) % 1.0, 0.0, atol=1e-12)


def test_fraction_unknown_part_errors():
    with pytest.raises(ValueError, match="part id"):
        compute_fractional_labels(_patches([[0, 1]]), [[0], [5]], ["a", "b"])


def test_fraction_unlabeled_patch_row_zero():
    labels = [[], []]
    fl = compute_fractional_labels(_patches([[0, 1]]), labels, ["a"])
    np.testing.assert_array_equal(fl.y, [[0.0]])


# ---------------------------------------------------------------------------
# stage 1 loss


def test_stage1_zero_when_aligned():
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (5, 7))
    loss = stage1_loss(Tensor(x), Tensor(x.copy()))
    # the 1e-12 norm guard leaves ~2*eps/|row| of slack
    assert loss.item() == pytest.approx(0.0, abs=1e-10)


def test_stage1_two_when_opposed():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (5, 7))
    loss = stage1_loss(Tensor(x), Tensor(-x))
    assert loss.item() == pytest.approx(2.0, abs=1e-10)


def test_stage1_one_when_orthogonal():
    pred = np.array([[1.0, 0.0], [0.0, 2.0]])
    targ = np.array([[0.0, 3.0], [1.0, 0.0]])
    assert stage1_loss(Tensor(pred), Tensor(targ)).item() == pytest.approx(1.0)


def test_stage1_range():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = rng.uniform(-1, 1, (4, 5))
        b = rng.uniform(-1, 1, (4, 5))
        v = stage1_loss(Tensor(a), Tensor(b)).item()
        assert 0.0 <= v <= 2.0


# ---------------------------------------------------------------------------
# stage 2 loss


def _unit_rows(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_stage2_closed_form_log2():
    # 1x1 grid, y=1; tau=1 and b=-1 give s = <z,t> + b = 0 exactly
    z = Tensor(_unit_rows([[1.0]]))
    loss = stage2_loss(z, _unit_rows([[1.0]]), np.array([[1.0]]),
                       log_tau=Tensor(np.asarray(0.0)),
                       bias=Tensor(np.asarray(-1.0)))
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_stage2_closed_form_negative_saturated():
    # 1x1 grid, y=0, s=-10: loss = log(1 + e^-10) ~ 4.5399e-5
    z = Tensor(_unit_rows([[1.0]]))
    loss = stage2_loss(z, _unit_rows([[1.0]]), np.array([[0.0]]),
                       log_tau=Tensor(np.asarray(0.0)),
                       bias=Tensor(np.asarray(-11.0)))
    assert loss.item() == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
    assert loss.item() == pytest.approx(4.5399e-5, rel=1e-3)


def test_stage2_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    z = _unit_rows(rng.uniform(-1, 1, (2, 6)))
    t = _unit_rows(rng.uniform(-1, 1, (2, 6)))
    y = np.array([[1.0, 0.0], [0.5, 0.0]])
    tau, b = 0.37, -2.0
    loss = stage2_loss(Tensor(z), t, y, Tensor(np.asarray(math.log(tau))),
                       Tensor(np.asarray(b)))
    expect = sigmoid_bce_scalar(z @ t.T, y, tau, b)
    assert loss.item() == pytest.approx(expect, rel=1e-12)


def test_stage2_binary_single_positive_reduces_to_bce():
    rng = np.random.default_rng(8)
    z = _unit_rows(rng.uniform(-1, 1, (4, 5)))
    t = _unit_rows(rng.uniform(-1, 1, (3, 5)))
    y = np.zeros((4, 3))
    y[np.arange(4), rng.integers(0, 3, 4)] = 1.0
    tau, b = 0.5, -1.0
    loss = stage2_loss(Tensor(z), t, y, Tensor(np.asarray(math.log(tau))),
                       Tensor(np.asarray(b)))
    expect = sigmoid_bce_scalar(z @ t.T, y, tau, b)
    assert loss.item() == pytest.approx(expect, rel=1e-12)


def test_stage2_additive_over_patches():
    rng = np.random.default_rng(9)
    z = _unit_rows(rng.uniform(-1, 1, (5, 4)))
    t = _unit_rows(rng.uniform(-1, 1, (3, 4)))
    y = rng.uniform(0, 1, (5, 3))
    lt, b = Tensor(np.asarray(math.log(0.2))), Tensor(np.asarray(-3.0))
    total = stage2_loss(Tensor(z), t, y, lt, b).item()
    parts = sum(stage2_loss(Tensor(z[i:i + 1]), t, y[i:i + 1], lt, b).item()
                for i in range(5))
    assert total == pytest.approx(parts, rel=1e-12)


def test_stage2_loss_nonnegative():
    rng = np.random.default_rng(10)
    for _ in range(10):
        z = _unit_rows(rng.uniform(-1, 1, (3, 4)))
        t = _unit_rows(rng.uniform(-1, 1, (2, 4)))
        y = rng.uniform(0, 1, (3, 2))
        v = stage2_loss(Tensor(z), t, y, Tensor(np.asarray(0.0)),
                        Tensor(np.asarray(-1.0))).item()
        assert v >= 0.0


def test_logit_shift_cannot_change_argmax():
    rng = np.random.default_rng(11)
    sims = rng.uniform(-1, 1, (6, 4))
    base = np.argmax(sims, axis=1)
    for tau, b in [(0.1, -10.0), (0.5, 3.0), (2.0, 0.0)]:
        np.testing.assert_array_equal(np.argmax(sims / tau + b, axis=1), base)


# ---------------------------------------------------------------------------
# gradient fidelity through the full model


def _loss_fn(stage, params, sample, table):
    pts = sample.points
    centers = farthest_point_sampling(pts, params.cfg.num_patches, 0)
    patches = build_patches(pts, centers, params.cfg.patch_size)

    from pa3d.model import encode_tokens, project, transformer_forward

    def f(_):
        toks = encode_tokens(params, patches, pts)
        z = transformer_forward(params, toks)
        if stage == 1:
            matched = match_patches(patches.centers, sample.centers)
            return stage1_loss(project(params, "h2d", z),
                               Tensor(sample.patch_targets[matched]))
        rows = table.subset(sample.part_ids).embeddings
        y = compute_fractional_labels(patches, sample.labels, sample.part_ids).y
        return stage2_loss(project(params, "htext", z), rows, y,
                           params["tau_bias/log_tau"], params["tau_bias/bias"])

    return f


@pytest.mark.parametrize("stage", [1, 2])
def test_stage_loss_gradients_pass_checker(stage):
    ts = micro_set(seed=3, count=1)
    params = micro_model(seed=4)
    f = _loss_fn(stage, params, ts.samples[0], ts.text_table)
    err = check_gradients(f, list(params.tensors.values()), step=1e-5)
    assert err < 1e-4


def test_stage2_tau_and_bias_get_gradients():
    ts = micro_set(seed=5, count=1)
    params = micro_model(seed=6)
    f = _loss_fn(2, params, ts.samples[0], ts.text_table)
    with Graph():
        grads = backward(f(None))
    assert "tau_bias/log_tau" in grads and "tau_bias/bias" in grads
    assert abs(float(grads["tau_bias/bias"].data)) > 0


# ---------------------------------------------------------------------------
# run_stage


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(stage="4")
    with pytest.raises(ValueError):
        StageConfig(stage="1", epochs=0)
    with pytest.raises(ValueError):
        StageConfig(stage="1", learning_rate=0)


def test_run_stage1_loss_decreases():
    ts = micro_set(seed=7)
    params = micro_model(seed=8)
    recs = run_stage(ts, params, StageConfig(stage="1", epochs=30,
                                             batch_size=3, seed=1))
    assert recs[-1]["loss"] < recs[0]["loss"]
    assert all(r["stage"] == "1" for r in recs)
    assert {"step", "stage", "loss", "lr", "grad_norm"} <= set(recs[0])


def test_run_stage_deterministic_bit_identical():
    ts = micro_set(seed=9)
    a, b = micro_model(seed=10), micro_model(seed=10)
    cfg = StageConfig(stage="1", epochs=4, batch_size=2, seed=2)
    run_stage(ts, a, cfg)
    run_stage(ts, b, cfg)
    for name in a.tensors:
        assert np.array_equal(a[name].data, b[name].data), name


def test_stage2_default_policy_freezes_early_groups():
    ts = micro_set(seed=11)
    params = micro_model(seed=12)
    before = {g: params.group_arrays(g) for g in params.groups()}
    run_stage(ts, params, StageConfig(stage="2", epochs=3, batch_size=3, seed=3))
    frozen = {g for g, v in params.trainable.items() if not v}
    assert "pointnet" in frozen and "head_2d" in frozen
    for g in frozen:
        after = params.group_arrays(g)
        for name, arr in before[g].items():
            assert np.array_equal(arr, after[name]), name
    # the trained groups actually moved
    assert any(
        not np.array_equal(before[g][n], params.group_arrays(g)[n])
        for g in params.groups() if params.trainable[g]
        for n in before[g])


def test_stage1_leaves_text_head_untouched():
    ts = micro_set(seed=13)
    params = micro_model(seed=14)
    before = params.group_arrays("head_text")
    before_tau = params.group_arrays("tau_bias")
    run_stage(ts, params, StageConfig(stage="1", epochs=2, batch_size=3, seed=4))
    for name, arr in params.group_arrays("head_text").items():
        assert np.array_equal(arr, before[name])
    for name, arr in params.group_arrays("tau_bias").items():
        assert np.array_equal(arr, before_tau[name])


def test_joint_mode_trains_both_heads():
    ts = micro_set(seed=15)
    params = micro_model(seed=16)
    b2d = params.group_arrays("head_2d")
    btx = params.group_arrays("head_text")
    run_stage(ts, params, StageConfig(stage="joint", epochs=2, batch_size=3,
                                      seed=5))
    assert any(not np.array_equal(params.group_arrays("head_2d")[n], b2d[n])
               for n in b2d)
    assert any(not np.array_equal(params.group_arrays("head_text")[n], btx[n])
               for n in btx)


def test_duplicated_shape_doubles_summed_loss():
    ts = micro_set(seed=17, count=1)
    params = micro_model(seed=18)
    f = _loss_fn(1, params, ts.samples[0], ts.text_table)
    a = f(None).item()
    b = f(None).item()
    assert a == b  # deterministic forward
    assert a + b == 2.0 * a


def test_non_finite_loss_aborts_with_diagnostic():
    ts = micro_set(seed=19)
    params = micro_model(seed=20)
    params["head_2d/w"].data[0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="stage"):
        run_stage(ts, params, StageConfig(stage="1", epochs=1, batch_size=3,
                                          seed=6))


def test_stage2_requires_text_table():
    ts = micro_set(seed=21)
    ts.text_table = None
    with pytest.raises(ValueError, match="text table"):
        run_stage(ts, micro_model(), StageConfig(stage="2", epochs=1))
