import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monoasrh import tensor as T
from monoasrh.errors import ConfigError, DimensionError
from monoasrh.losses import (
    BIN_CENTERS,
    BIN_WIDTH,
    HeatmapTarget,
    LossReport,
    LossWeightsConfig,
    draw_gaussian,
    focal_heatmap_loss,
    gaussian_radius,
    heatmap_loss,
    heatmap_loss_terms,
    l1_masked,
    laplacian_depth_loss,
    multibin_decode,
    multibin_encode,
    multibin_loss,
    scg_loss,
    suppress_peaks,
    top_peaks,
    total_loss,
)
from monoasrh.nn import make_rng
from monoasrh.tensor import Tensor


def _target(shape=(3, 8, 8), centres=((1, 3, 4),), radius=2):
    g = np.zeros(shape)
    for c, x, y in centres:
        draw_gaussian(g[c], (x, y), radius)
    return HeatmapTarget(g)


def test_config_validation():
    with pytest.raises(ConfigError):
        LossWeightsConfig(scg_threshold=1.0)
    with pytest.raises(ConfigError):
        LossWeightsConfig(scg_lambda=-0.1)


def test_gaussian_target_shape():
    t = _target()
    assert t.gaussians.max() == 1.0 and t.positive_mask.sum() == 1
    assert t.gaussians[1, 4, 3] == 1.0
    assert (t.gaussians >= 0).all() and (t.gaussians <= 1).all()
    assert gaussian_radius(40, 60) > gaussian_radius(10, 15) > 0


def test_focal_near_optimum():
    t = _target()
    pred = np.where(t.positive_mask, 1 - 1e-6, 1e-6)
    assert focal_heatmap_loss(Tensor(pred), t).item() < 1e-4


def test_focal_single_positive_half_everywhere():
    g = np.zeros((1, 3, 3))
    g[0, 1, 1] = 1.0
    t = HeatmapTarget(g)
    with T.precision(np.float64):
        loss = focal_heatmap_loss(Tensor(np.full(g.shape, 0.5)), t).item()
    pos = 0.25 * math.log(2)
    neg = 8 * 0.25 * math.log(2)  # (1-Y)^4 = 1 on the 8 zero pixels
    assert pos == pytest.approx(0.1733, abs=1e-4)
    assert loss == pytest.approx(pos + neg, rel=1e-12)


def test_focal_duplicated_image_unchanged(rng):
    t = _target()
    pred = rng.uniform(0.01, 0.99, size=t.gaussians.shape)
    single = focal_heatmap_loss(Tensor(pred[None]), HeatmapTarget(t.gaussians[None])).item()
    double = focal_heatmap_loss(
        Tensor(np.stack([pred, pred])), HeatmapTarget(np.stack([t.gaussians, t.gaussians]))
    ).item()
    assert double == pytest.approx(single, rel=1e-5)


def test_focal_shape_mismatch():
    with pytest.raises(DimensionError):
        focal_heatmap_loss(Tensor(np.full((3, 4, 4), 0.5)), _target())


def _two_peaks(a=0.95, b=0.5):
    heat = np.full((1, 3, 8, 8), 0.01)
    heat[0, 0, 2, 2] = a
    heat[0, 2, 6, 5] = b
    return heat


def test_scg_examples():
    with T.precision(np.float64):
        assert scg_loss(Tensor(_two_peaks()), k=2, threshold=0.9).item() == pytest.approx(-math.log(0.95), abs=1e-12)
        assert -math.log(0.95) == pytest.approx(0.05129, abs=1e-5)
        assert scg_loss(Tensor(_two_peaks(0.85)), k=2, threshold=0.9).item() == 0.0
        assert scg_loss(Tensor(_two_peaks(1 - 1e-9)), k=2, threshold=0.9).item() < 1e-8
    with pytest.raises(ConfigError):
        scg_loss(Tensor(_two_peaks()), k=0, threshold=0.9)


def test_scg_uses_suppressed_peaks():
    heat = np.full((1, 1, 6, 6), 0.01)
    heat[0, 0, 2, 2] = 0.97
    heat[0, 0, 2, 3] = 0.96  # neighbour of a stronger peak, suppressed
    with T.precision(np.float64):
        assert scg_loss(Tensor(heat), k=2, threshold=0.9).item() == pytest.approx(-math.log(0.97))


def test_scg_gradient_only_on_selected_peaks():
    x = Tensor(_two_peaks(), requires_grad=True)
    scg_loss(x, k=2, threshold=0.9).backward()
    nz = np.argwhere(x.grad != 0)
    assert nz.tolist() == [[0, 0, 2, 2]]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.91, 0.999))
def test_scg_monotone_in_confidence(seed, bump):
    rng = make_rng(seed)
    heat = rng.uniform(0.0, 0.6, size=(2, 3, 6, 6))
    heat[0, 1, 3, 3] = 0.905
    heat[1, 0, 1, 4] = 0.95
    base = scg_loss(Tensor(heat), 5, 0.9).item()
    raised = heat.copy()
    raised[0, 1, 3, 3] = max(bump, 0.905)
    assert scg_loss(Tensor(raised), 5, 0.9).item() <= base + 1e-7


def test_heatmap_decomposition(rng):
    t = HeatmapTarget(np.stack([_target().gaussians]))
    pred = Tensor(_two_peaks())
    cfg = LossWeightsConfig(top_k=2)
    focal, scg = heatmap_loss_terms(pred, t, cfg)
    assert heatmap_loss(pred, t, cfg).item() == (focal + 0.01 * scg).item()
    zero = LossWeightsConfig(scg_lambda=0.0, top_k=2)
    assert heatmap_loss(pred, t, zero).item() == focal_heatmap_loss(pred, t).item()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_heatmap_loss_nonnegative(seed):
    rng = make_rng(seed)
    t = _target(centres=((0, 2, 2), (2, 6, 5)))
    pred = Tensor(rng.uniform(0, 1, size=t.gaussians.shape))
    assert heatmap_loss(pred, t, LossWeightsConfig(top_k=5)).item() >= 0


def test_l1_examples():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    assert l1_masked(x, x.data).item() == 0.0
    assert l1_masked(x, x.data + np.array([[1.0, -1.0]] * 3)).item() == 1.0
    assert l1_masked(x, x.data + 5, np.zeros((3, 1))).item() == 0.0
    assert l1_masked(x, x.data + [[2.0, 2.0], [0, 0], [0, 0]], np.array([[1.0], [0], [0]])).item() == 2.0
    with pytest.raises(DimensionError):
        l1_masked(x, np.zeros(6))


def test_multibin_layout():
    assert len(BIN_CENTERS) == 12 and BIN_WIDTH == pytest.approx(math.pi / 6)
    b, res = multibin_encode(BIN_CENTERS)
    assert b.tolist() == list(range(12)) and np.abs(res).max() < 1e-12
    # wrapping
    b2, r2 = multibin_encode(BIN_CENTERS[3] + 2 * math.pi)
    assert b2 == 3 and abs(r2) < 1e-9


def test_multibin_round_trip_360():
    alphas = np.linspace(-math.pi, math.pi, 360, endpoint=False)
    b, res = multibin_encode(alphas)
    theta = np.zeros((360, 24))
    theta[np.arange(360), b] = 20.0
    theta[np.arange(360), 12 + b] = res
    err = np.abs((multibin_decode(theta) - alphas + math.pi) % (2 * math.pi) - math.pi)
    assert err.max() <= 1e-6
    # without the residual the error is bounded by half a bin
    theta[:, 12:] = 0
    err = np.abs((multibin_decode(theta) - alphas + math.pi) % (2 * math.pi) - math.pi)
    assert err.max() <= BIN_WIDTH / 2 + 1e-12


def test_multibin_loss_near_floor():
    alphas = np.array([0.3, -2.0, 3.1])
    b, res = multibin_encode(alphas)
    theta = np.zeros((3, 24))
    theta[np.arange(3), b] = 20.0
    theta[np.arange(3), 12 + b] = res
    with T.precision(np.float64):
        assert multibin_loss(Tensor(theta), alphas).item() < 1e-3
    with pytest.raises(DimensionError):
        multibin_loss(Tensor(np.zeros((3, 12))), alphas)


def test_laplacian_examples():
    with T.precision(np.float64):
        assert laplacian_depth_loss(Tensor([10.0]), Tensor([0.0]), [10.0]).item() == 0.0
        assert laplacian_depth_loss(Tensor([10.0]), Tensor([0.0]), [11.0]).item() == pytest.approx(math.sqrt(2), abs=1e-12)
        r = 2.5
        grid = np.linspace(-3, 3, 6001)
        losses = [laplacian_depth_loss(Tensor([0.0]), Tensor([g]), [r]).item() for g in grid]
        best = math.exp(grid[int(np.argmin(losses))])
    assert best == pytest.approx(math.sqrt(2) * r, rel=2e-3)


def test_laplacian_clamps_log_sigma():
    with T.precision(np.float64):
        a = laplacian_depth_loss(Tensor([0.0]), Tensor([-50.0]), [1e-3]).item()
        b = laplacian_depth_loss(Tensor([0.0]), Tensor([-10.0]), [1e-3]).item()
    assert a == b and math.isfinite(a)


def _perfect_batch():
    t = HeatmapTarget(np.stack([_target().gaussians]))
    heat = np.where(t.positive_mask, 1 - 1e-6, 1e-6)
    alpha = np.array([0.4, -1.1])
    b, res = multibin_encode(alpha)
    theta = np.zeros((2, 24))
    theta[np.arange(2), b] = 30.0
    theta[np.arange(2), 12 + b] = res
    vec = np.array([[1.0, 2.0], [3.0, 4.0]])
    size = np.array([[1.5, 1.6, 3.9], [1.7, 0.6, 0.8]])
    depth = np.array([12.0, 30.0])
    preds = dict(
        heatmap=Tensor(heat), o2d=Tensor(vec), s2d=Tensor(vec), o3d=Tensor(vec), s3d=Tensor(size),
        theta=Tensor(theta), depth=Tensor(depth), log_sigma=Tensor(np.zeros(2)),
    )
    targets = dict(heatmap=t, o2d=vec, s2d=vec, o3d=vec, s3d=size, alpha=alpha, depth=depth)
    return preds, targets


def test_total_loss_perfect_and_report():
    with T.precision(np.float64):
        preds, targets = _perfect_batch()
        total, report = total_loss(preds, targets, LossWeightsConfig(), step=7)
    assert isinstance(report, LossReport)
    for key in ("focal", "scg", "heatmap", "o2d", "s2d", "o3d", "s3d", "theta", "depth"):
        assert abs(getattr(report, key)) <= 1e-3, key
    assert report.terms_sum() == pytest.approx(report.total, abs=1e-6)
    import json

    row = json.loads(report.to_json())
    assert list(row) == ["step", "focal", "scg", "heatmap", "o2d", "s2d", "o3d", "s3d", "theta", "depth", "total"]
    assert row["step"] == 7


def test_total_loss_report_sums(rng):
    preds, targets = _perfect_batch()
    preds = {k: (Tensor(v.data + rng.normal(scale=0.3, size=v.shape).astype(np.float32)) if k != "heatmap" else v)
             for k, v in preds.items()}
    _, report = total_loss(preds, targets, LossWeightsConfig())
    assert report.terms_sum() == pytest.approx(report.total, abs=1e-5)


def test_peak_helpers():
    heat = np.zeros((2, 5, 5))
    heat[0, 2, 2] = 0.9
    heat[0, 2, 3] = 0.8
    heat[1, 0, 0] = 0.7
    sup = suppress_peaks(heat)
    assert sup[0, 2, 3] == 0 and sup[0, 2, 2] == 0.9
    idx, score = top_peaks(heat, 2)
    assert score.tolist() == [0.9, 0.7]
    assert np.unravel_index(idx[1], heat.shape) == (1, 0, 0)
