"""Tile planning, confidence-weighted merging, and the accuracy metrics."""
import numpy as np
import pytest

from crocoforge import infer as I
from crocoforge import model as M
from crocoforge.tensor import ContractViolation


def tiny():
    return M.make_config("tiny")


# ---------------------------------------------------------------------------
# tile planning


def test_single_tile_when_tile_equals_image():
    plan = I.plan_tiles((64, 48), (64, 48), 0.5)
    assert plan.origins == ((0, 0),)


def test_two_tiles_per_row_at_zero_overlap():
    plan = I.plan_tiles((128, 64), (64, 64), 0.0)
    assert plan.origins == ((0, 0), (64, 0))


def test_origins_row_major_and_clamped():
    plan = I.plan_tiles((100, 70), (64, 64), 0.5)
    xs = sorted({x for x, _ in plan.origins})
    ys = sorted({y for _, y in plan.origins})
    assert xs[-1] == 100 - 64 and ys[-1] == 70 - 64
    assert plan.origins == tuple((x, y) for y in ys for x in xs)


def test_union_of_tiles_covers_image():
    for overlap in [0.0, 0.3, 0.5, 0.7]:
        plan = I.plan_tiles((137, 91), (48, 32), overlap)
        cover = np.zeros((91, 137), bool)
        tw, th = plan.tile_size
        for x, y in plan.origins:
            cover[y : y + th, x : x + tw] = True
        assert cover.all()


def test_tile_counts_non_decreasing_in_overlap():
    counts = [
        len(I.plan_tiles((1920, 1080), (704, 352), ov).origins)
        for ov in np.linspace(0.0, 0.9, 19)
    ]
    assert counts == sorted(counts)
    assert counts[0] == 3 * 4  # ceil(1920/704) x ceil(1080/352), hand-checked
    assert len(I.plan_tiles((704, 352), (704, 352), 0.0).origins) == 1


def test_oversized_tile_rejected():
    with pytest.raises(ContractViolation):
        I.plan_tiles((64, 64), (65, 64), 0.0)
    with pytest.raises(ContractViolation):
        I.plan_tiles((64, 64), (64, 64), 1.0)


# ---------------------------------------------------------------------------
# merge weights


@pytest.mark.parametrize("kind", list(I.MergeWeighting))
def test_merge_weight_monotone_decreasing(kind):
    d = np.linspace(-50, 50, 4001)
    w = I.merge_weight(d, kind)
    assert (np.diff(w) < 0).all()
    assert (w > 0).all()


def test_merge_weight_values():
    # w(0) for the bounded kinds: exp(-2*eta*alpha*(sigmoid(0)-0.5)) = 1
    assert np.isclose(I.merge_weight(0.0, I.MergeWeighting.stereo), 1.0)
    assert np.isclose(I.merge_weight(0.0, I.MergeWeighting.flow), 1.0)
    assert np.isclose(I.merge_weight(0.0, I.MergeWeighting.unbounded), 1.0)
    assert np.isclose(I.merge_weight(2.0, I.MergeWeighting.unbounded), np.exp(-6.0))


# ---------------------------------------------------------------------------
# tiled prediction


def test_single_tile_bitwise_identity():
    cfg = tiny()
    params = M.init_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    a = rng.integers(0, 255, (64, 64, 3)).astype(np.uint8)
    b = rng.integers(0, 255, (64, 64, 3)).astype(np.uint8)
    direct = M.forward_dense(a, b, cfg, params, M.ScaleParam.stereo_bounded)
    mu, d_raw = I.tiled_predict(a, b, cfg, params, M.ScaleParam.stereo_bounded)
    assert np.array_equal(mu, direct.mu.data)
    assert np.array_equal(d_raw, direct.d_raw.data)


@pytest.mark.parametrize("overlap", [0.0, 0.5, 0.9])
def test_constant_field_tiled_matches_untiled(overlap):
    cfg = tiny()
    params = M.init_params(cfg, seed=0)
    img = np.full((64, 96, 3), 120, np.uint8)
    full = M.forward_dense(img, img, cfg, params, M.ScaleParam.stereo_bounded).mu.data
    mu, _ = I.tiled_predict(
        img, img, cfg, params, M.ScaleParam.stereo_bounded, tile_hw=(32, 32), overlap=overlap
    )
    assert np.abs(mu - full).max() < 1e-6


def test_equal_weights_give_arithmetic_mean():
    # merge two synthetic tiles by hand through the accumulation formula
    mu1, mu2 = 3.0, 5.0
    w = I.merge_weight(0.7, I.MergeWeighting.stereo)
    merged = (w * mu1 + w * mu2) / (2 * w)
    assert np.isclose(merged, 4.0)


def test_clamp_applied_after_merge():
    cfg = tiny()
    params = M.init_params(cfg, seed=0)
    rng = np.random.default_rng(2)
    a = rng.integers(0, 255, (64, 64, 3)).astype(np.uint8)
    mu, _ = I.tiled_predict(
        a, a, cfg, params, M.ScaleParam.stereo_bounded, clamp=(-0.001, 0.001)
    )
    assert mu.min() >= -0.001 and mu.max() <= 0.001


def test_shift_secondary_flag_runs():
    cfg = tiny()
    params = M.init_params(cfg, seed=0)
    rng = np.random.default_rng(3)
    a = rng.integers(0, 255, (64, 96, 3)).astype(np.uint8)
    b = rng.integers(0, 255, (64, 96, 3)).astype(np.uint8)
    mu, _ = I.tiled_predict(
        a, b, cfg, params, M.ScaleParam.stereo_bounded,
        tile_hw=(64, 64), overlap=0.5, shift_secondary=True,
    )
    assert mu.shape == (64, 96, 1)
    assert np.isfinite(mu).all()


def test_merge_order_independence():
    # accumulation is a sum, so any tile order gives the same merged field
    rng = np.random.default_rng(4)
    h = w = 8
    tiles = [(0, 0), (0, 4), (4, 0), (4, 4)]
    mus = {t: rng.normal(size=(4, 4)) for t in tiles}
    ds = {t: rng.normal(size=(4, 4)) for t in tiles}

    def merge(order):
        acc_mu = np.zeros((h, w))
        acc_w = np.zeros((h, w))
        for (y, x) in order:
            wt = I.merge_weight(ds[(y, x)], I.MergeWeighting.stereo)
            acc_mu[y : y + 4, x : x + 4] += mus[(y, x)] * wt
            acc_w[y : y + 4, x : x + 4] += wt
        return acc_mu / np.maximum(acc_w, 1e-30)

    a = merge(tiles)
    b = merge(tiles[::-1])
    assert np.allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------------------
# metrics


def test_metric_hand_case():
    pred = np.array([[0.2, 0.7], [1.5, 3.5]])
    gt = np.zeros((2, 2))
    out = I.evaluate(pred, gt)
    assert out["epe"] == pytest.approx(1.475)
    assert out["bad_1"] == 50.0
    assert out["bad_3"] == 25.0
    assert out["outlier_3px"] == 25.0


def test_bad_pixel_threshold_is_strict():
    pred = np.array([[1.0, 2.0]])
    gt = np.zeros((1, 2))
    assert I.bad_pixel_pct(pred, gt, 1.0) == 50.0  # error exactly 1 not counted
    assert I.bad_pixel_pct(pred, gt, 0.999) == 100.0


def test_epe_flow_is_euclidean():
    pred = np.zeros((1, 1, 2))
    gt = np.array([[[3.0, 4.0]]])
    assert I.epe(pred, gt) == pytest.approx(5.0)


def test_metrics_respect_valid_mask():
    pred = np.array([[0.0, 100.0]])
    gt = np.zeros((1, 2))
    valid = np.array([[True, False]])
    assert I.epe(pred, gt, valid) == 0.0
    with pytest.raises(ContractViolation):
        I.epe(pred, gt, np.zeros((1, 2), bool))


def test_metrics_shape_mismatch_rejected():
    with pytest.raises(ContractViolation):
        I.epe(np.zeros((2, 2)), np.zeros((3, 3)))
