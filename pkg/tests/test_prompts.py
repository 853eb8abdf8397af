import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from promptdet import diffnum as dn
from promptdet.prompts import (
    MSBNLayer, OCRLHead, apply_mask_concat, batch_norm, compute_range_mask, msbn_forward, ocrl_apply,
    ocrl_discrimination_loss,
)
from promptdet.synthdata import GLOBAL_RANGE, preset_specs, with_range

PRESETS = preset_specs()
GXY = (-75.2, -75.2, 75.2, 75.2)


def batch(seed, frames=3, per=(5, 9), C=4):
    r = np.random.default_rng(seed)
    sizes = r.integers(per[0], per[1], frames)
    fop = np.repeat(np.arange(frames), sizes)
    P = r.normal(size=(len(fop), C)) * r.uniform(0.5, 3, C) + r.normal(size=C)
    # give each frame its own offset so instance means differ
    P = P + r.normal(size=(frames, C))[fop] * 2
    return P, fop


# ---------------------------------------------------------------- MSBN

def test_msbn_validation():
    with pytest.raises(ValueError):
        MSBNLayer(2, alpha=1.5)
    with pytest.raises(ValueError):
        MSBNLayer(2, epsilon=0.0)
    layer = MSBNLayer(3)
    with pytest.raises(ValueError, match="channels"):
        msbn_forward(dn.tensor(np.zeros((4, 2))), [0, 0, 1, 1], layer, True)
    with pytest.raises(ValueError, match="empty"):
        msbn_forward(dn.tensor(np.zeros((0, 3))), [], layer, True)
    with pytest.raises(ValueError, match="empty"):
        msbn_forward(dn.tensor(np.zeros((2, 3))), [0, 2], layer, True, num_frames=3)


@pytest.mark.parametrize("seed", range(10))
def test_msbn_alpha_zero_is_batch_norm(seed):
    P, fop = batch(seed)
    a = msbn_forward(dn.tensor(P), fop, MSBNLayer(4, alpha=0.0), True).value
    b = batch_norm(dn.tensor(P), MSBNLayer(4), True).value
    assert np.max(np.abs(a - b)) < 1e-6
    # independent oracle
    ref = (P - P.mean(0)) / np.sqrt(P.var(0) + 1e-5)
    assert np.max(np.abs(a - ref)) < 1e-6


def test_msbn_alpha_one_centers_each_frame():
    P, fop = batch(3)
    out = msbn_forward(dn.tensor(P), fop, MSBNLayer(4, alpha=1.0), True).value
    for i in range(3):
        np.testing.assert_allclose(out[fop == i].mean(0), 0.0, atol=1e-12)


def test_msbn_hand_example():
    P = np.array([[1.0], [3.0], [5.0], [7.0]])
    layer = MSBNLayer(1, alpha=0.5, epsilon=1e-12)
    out = msbn_forward(dn.tensor(P), [0, 0, 1, 1], layer, True).value[:, 0]
    s5 = math.sqrt(5)
    np.testing.assert_allclose(out, [-2 / s5, 0.0, 0.0, 2 / s5], atol=1e-9)


@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_msbn_permutation_equivariant(seed, alpha):
    P, fop = batch(seed)
    perm = np.random.default_rng(seed + 1).permutation(len(fop))
    a = msbn_forward(dn.tensor(P), fop, MSBNLayer(4, alpha=alpha), True).value
    b = msbn_forward(dn.tensor(P[perm]), fop[perm], MSBNLayer(4, alpha=alpha), True).value
    np.testing.assert_allclose(b, a[perm], atol=1e-10)


@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_msbn_matches_direct_formula(seed, alpha):
    P, fop = batch(seed)
    layer = MSBNLayer(4, alpha=alpha)
    layer.gamma.value[:] = np.linspace(0.5, 2, 4)
    layer.beta.value[:] = np.linspace(-1, 1, 4)
    out = msbn_forward(dn.tensor(P), fop, layer, True).value
    mu, var = P.mean(0), ((P - P.mean(0)) ** 2).mean(0)
    for i, row in enumerate(P):
        mi = P[fop == fop[i]].mean(0)
        ref = (row - alpha * mi - (1 - alpha) * mu) / np.sqrt(var + 1e-5) * layer.gamma.value + layer.beta.value
        np.testing.assert_allclose(out[i], ref, atol=1e-10)


def test_msbn_running_stats_and_inference():
    P, fop = batch(1)
    layer = MSBNLayer(4, alpha=0.3)
    msbn_forward(dn.tensor(P), fop, layer, True)
    np.testing.assert_allclose(layer.running_mean, 0.1 * P.mean(0))
    np.testing.assert_allclose(layer.running_var, 0.9 + 0.1 * P.var(0))
    assert np.all(layer.running_var >= 0)
    # inference: basic stats from the running buffers, instance mean from the input
    Q = P[fop == 0]
    out = msbn_forward(dn.tensor(Q), np.zeros(len(Q)), layer, False).value
    ref = (Q - 0.3 * Q.mean(0) - 0.7 * layer.running_mean) / np.sqrt(layer.running_var + 1e-5)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    before = layer.running_mean.copy()
    msbn_forward(dn.tensor(Q), np.zeros(len(Q)), layer, False)
    np.testing.assert_array_equal(layer.running_mean, before)


@pytest.mark.parametrize("seed", range(5))
def test_msbn_grad(seed):
    P, fop = batch(seed, C=3)
    x = dn.Tensor(P, requires_grad=True)
    layer = MSBNLayer(3, alpha=0.4)
    proj = np.random.default_rng(seed).normal(size=P.shape)
    build = lambda: dn.sum(dn.mul(msbn_forward(x, fop, layer, True), proj))  # noqa: E731
    for t in (x, layer.gamma, layer.beta):
        t.grad = None
        dn.backward(build())
        assert rel_err(t.grad, numeric_grad(lambda: float(build().value), t.value)) < 1e-4


# ---------------------------------------------------------------- range masks

def exact_corners(xy, gxy, H, W):
    """Floor/ceil mapping in exact rational arithmetic."""
    f = lambda v: Fraction(str(v))  # noqa: E731
    x1, y1, x2, y2 = map(f, gxy)
    a1, b1, a2, b2 = map(f, xy)
    m1 = math.floor((a1 - x1) / (x2 - x1) * H)
    n1 = math.floor((b1 - y1) / (y2 - y1) * W)
    m2 = math.ceil((a2 - x1) / (x2 - x1) * H)
    n2 = math.ceil((b2 - y1) / (y2 - y1) * W)
    return (min(max(m1, 0), H - 1), min(max(n1, 0), W - 1), min(max(m2, 0), H - 1), min(max(n2, 0), W - 1))


def raster_mask(xy, gxy, H, W):
    cx = gxy[0] + (np.arange(H) + 0.5) * (gxy[2] - gxy[0]) / H
    cy = gxy[1] + (np.arange(W) + 0.5) * (gxy[3] - gxy[1]) / W
    return ((cx[:, None] >= xy[0]) & (cx[:, None] <= xy[2]) & (cy[None] >= xy[1]) & (cy[None] <= xy[3])).astype(np.uint8)


def test_full_range_mask_all_ones():
    m = compute_range_mask(PRESETS["W-like"], GXY, 188, 188)
    assert m.bits.all()


def test_k_like_mask_by_hand():
    m = compute_range_mask(PRESETS["K-like"], GXY, 188, 188)
    assert m.corners == (94, 44, 182, 144)
    assert int(m.bits.sum()) == 89 * 101
    assert m.bits[94:183, 44:145].all()
    assert m.corners == exact_corners(PRESETS["K-like"].xy_range, GXY, 188, 188)


def test_mask_accepts_six_tuple_and_rejects_outside():
    assert compute_range_mask(PRESETS["K-like"], GLOBAL_RANGE, 188, 188).corners == (94, 44, 182, 144)
    wide = with_range(PRESETS["K-like"], (-80, -40, -2, 70.4, 40, 2))
    with pytest.raises(ValueError, match="outside"):
        compute_range_mask(wide, GXY, 188, 188)


xy_st = st.tuples(st.floats(-75.2, 70), st.floats(-75.2, 70), st.floats(0.5, 150), st.floats(0.5, 150)).map(
    lambda t: (round(t[0], 2), round(t[1], 2), round(min(t[0] + t[2], 75.2), 2), round(min(t[1] + t[3], 75.2), 2)))


@given(xy_st, st.sampled_from([(188, 188), (94, 94), (50, 70)]))
def test_mask_against_oracles(xy, hw):
    H, W = hw
    spec = with_range(PRESETS["W-like"], (xy[0], xy[1], -2, xy[2], xy[3], 4))
    m = compute_range_mask(spec, GXY, H, W)
    assert m.corners == exact_corners(xy, GXY, H, W)
    ref = raster_mask(xy, GXY, H, W)
    # ones region covers the continuous rectangle; disagreement stays within one cell
    # of the continuous mapped edges
    assert np.all(m.bits >= ref)
    u = [(xy[0] + 75.2) / 150.4 * H, (xy[2] + 75.2) / 150.4 * H]
    v = [(xy[1] + 75.2) / 150.4 * W, (xy[3] + 75.2) / 150.4 * W]
    near = lambda i, edges: any(e - 2 <= i <= e + 1 for e in edges)  # noqa: E731
    for i, j in np.argwhere(m.bits != ref):
        assert near(i, u) or near(j, v)


@given(xy_st, st.floats(0, 5), st.floats(0, 5))
def test_mask_monotone_under_enlarging(xy, gx, gy):
    big = (max(xy[0] - gx, -75.2), max(xy[1] - gy, -75.2), min(xy[2] + gx, 75.2), min(xy[3] + gy, 75.2))
    base = PRESETS["W-like"]
    small = compute_range_mask(with_range(base, (xy[0], xy[1], -2, xy[2], xy[3], 4)), GXY, 188, 188)
    large = compute_range_mask(with_range(base, (big[0], big[1], -2, big[2], big[3], 4)), GXY, 188, 188)
    assert np.all(large.bits >= small.bits)


def test_mask_resample_halves_corners():
    m = compute_range_mask(PRESETS["K-like"], GXY, 188, 188).resampled(94, 94)
    assert m.corners == (47, 22, 91, 72)
    rows = np.arange(94) * 2
    np.testing.assert_array_equal(m.bits, compute_range_mask(PRESETS["K-like"], GXY, 188, 188).bits[np.ix_(rows, rows)])


def test_mask_export_formats():
    m = compute_range_mask(PRESETS["K-like"], GXY, 8, 6)
    pgm = m.to_pgm()
    assert pgm.startswith(b"P5\n6 8\n255\n") and len(pgm) == len(b"P5\n6 8\n255\n") + 48
    d = m.to_dict()
    assert len(d["rows"]) == 8 and sum(r.count("1") for r in d["rows"]) == int(m.bits.sum())


def test_concat_all_ones_and_degenerate():
    ones = compute_range_mask(PRESETS["W-like"], GXY, 4, 4)
    x = dn.Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)), requires_grad=True)
    out = apply_mask_concat(x, ones)
    assert out.shape == (2, 4, 4, 4)
    assert np.all(out.value[:, 3] == 1.0)
    np.testing.assert_array_equal(out.value[:, :3], x.value)
    empty = apply_mask_concat(dn.tensor(np.zeros((1, 0, 4, 4))), ones)
    np.testing.assert_array_equal(empty.value, np.ones((1, 1, 4, 4)))


def test_concat_per_sample_masks_resampled_and_no_grad_to_mask():
    k = compute_range_mask(PRESETS["K-like"], GXY, 188, 188)
    w = compute_range_mask(PRESETS["W-like"], GXY, 188, 188)
    x = dn.Tensor(np.zeros((2, 1, 94, 94)), requires_grad=True)
    out = apply_mask_concat(x, [k, w])
    np.testing.assert_array_equal(out.value[0, 1], k.resampled(94, 94).bits)
    assert out.value[1, 1].all()
    dn.backward(dn.sum(out))
    np.testing.assert_array_equal(x.grad, 1.0)
    with pytest.raises(ValueError):
        apply_mask_concat(x, [k])


# ---------------------------------------------------------------- OCRL

def make_head(F=6, N=2, seed=0):
    return OCRLHead.init(F, N, np.random.default_rng(seed))


def test_head_shapes():
    head = make_head(8, 3)
    r = head.residual(dn.tensor(np.zeros((5, 8))))
    assert r.shape == (5, 8)
    assert head.discriminate(r).shape == (5, 3)


def test_zero_residual_is_identity():
    head = make_head()
    for k in ("f.w2", "f.b2"):
        head.params[k].value[:] = 0
    x = dn.tensor(np.random.default_rng(1).normal(size=(4, 6)))
    xh, r = ocrl_apply(x, head)
    np.testing.assert_array_equal(xh.value, x.value)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        ocrl_apply(dn.tensor(np.zeros((2, 5))), make_head(6))


@pytest.mark.parametrize("seed", range(3))
def test_identity_path_gradient_is_ones(seed):
    head = make_head(seed=seed)
    x = dn.Tensor(np.random.default_rng(seed).normal(size=(4, 6)), requires_grad=True)
    xh, _ = ocrl_apply(x, head)
    dn.backward(dn.sum(xh))
    np.testing.assert_array_equal(x.grad, np.ones((4, 6)))


def test_residual_params_receive_gradient():
    head = make_head()
    x = dn.tensor(np.random.default_rng(2).normal(size=(4, 6)))
    build = lambda: dn.sum(ocrl_apply(x, head)[0])  # noqa: E731
    for k in ("f.w1", "f.w2", "f.b2"):
        p = head.params[k]
        p.grad = None
        dn.backward(build())
        n = numeric_grad(lambda: float(build().value), p.value)
        assert np.abs(n).max() > 1e-6
        assert rel_err(p.grad, n) < 1e-5


def test_uniform_logits_give_ln2():
    head = make_head()
    for k in ("d.w2", "d.b2"):
        head.params[k].value[:] = 0
    loss = ocrl_discrimination_loss(dn.tensor(np.ones((3, 6))), [0, 1, 1], head)
    assert float(loss.value) == pytest.approx(math.log(2), abs=1e-12)


def test_id_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        ocrl_discrimination_loss(dn.tensor(np.ones((2, 6))), [0, 2], make_head())


def test_discrimination_loss_does_not_reach_features():
    head = make_head()
    x = dn.Tensor(np.random.default_rng(3).normal(size=(5, 6)), requires_grad=True)
    _, r = ocrl_apply(x, head)
    dn.backward(ocrl_discrimination_loss(r, [0, 1, 0, 1, 1], head))
    assert x.grad is None or not np.any(x.grad)
    assert np.any(head.params["f.w1"].grad)


def test_micro_case_separable_residuals():
    r = np.random.default_rng(0)
    ids = np.array([0] * 5 + [1] * 5)
    res = np.where(ids[:, None] == 0, 1.0, -1.0) + 0.1 * r.normal(size=(10, 6))
    head = make_head()
    d_params = {k: v for k, v in head.params.items() if k.startswith("d.")}
    state = dn.OptimizerState(lr=0.01)
    for _ in range(200):
        loss = ocrl_discrimination_loss(dn.tensor(res), ids, head)
        for p in d_params.values():
            p.grad = None
        dn.backward(loss)
        dn.adam_step(d_params, {k: p.grad for k, p in d_params.items()}, state)
    loss = ocrl_discrimination_loss(dn.tensor(res), ids, head)
    pred = np.argmax(head.discriminate(dn.tensor(res)).value, axis=1)
    assert np.all(pred == ids)
    assert float(loss.value) < 0.1
