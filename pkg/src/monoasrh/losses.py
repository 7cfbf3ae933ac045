"""Training losses: focal + selective-confidence heatmap loss, L1 terms,
multi-bin orientation and Laplacian aleatoric depth."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

NUM_BINS = 12
BIN_WIDTH = 2 * math.pi / NUM_BINS
BIN_CENTERS = -math.pi + (np.arange(NUM_BINS) + 0.5) * BIN_WIDTH


@dataclass
class LossWeightsConfig:
    scg_lambda: float = 0.01
    scg_threshold: float = 0.9
    top_k: int = 50
    focal_alpha: float = 2.0
    focal_beta: float = 4.0

    def __post_init__(self):
        if not 0.0 < self.scg_threshold < 1.0:
            raise ConfigError("scg_threshold must lie in (0, 1)")
        if self.scg_lambda < 0:
            raise ConfigError("scg_lambda must be non-negative")


@dataclass
class HeatmapTarget:
    gaussians: np.ndarray  # [B,] classes×h×w in [0, 1]
    positive_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.positive_mask is None:
            self.positive_mask = self.gaussians == 1.0


# ---------------------------------------------------------------------------
# target rendering


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """CornerNet radius: largest corner shift keeping IoU >= min_overlap."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * a1 * c1)) / 2

    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2**2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, center: tuple[int, int], radius: int) -> None:
    """Max-splat a Gaussian with sigma = diameter/6 at integer (x, y) ``center``."""
    radius = max(0, int(radius))
    diameter = 2 * radius + 1
    sigma = diameter / 6.0
    m = np.arange(-radius, radius + 1)
    g = np.exp(-(m[:, None] ** 2 + m[None, :] ** 2) / (2 * sigma * sigma))
    g[g < np.finfo(g.dtype).eps * g.max()] = 0
    x, y = int(center[0]), int(center[1])
    h, w = heatmap.shape
    left, right = min(x, radius), min(w - x, radius + 1)
    top, bottom = min(y, radius), min(h - y, radius + 1)
    if left + right <= 0 or top + bottom <= 0:
        return
    region = heatmap[y - top : y + bottom, x - left : x + right]
    patch = g[radius - top : radius + bottom, radius - left : radius + right]
    np.maximum(region, patch, out=region)


# ---------------------------------------------------------------------------
# heatmap losses


def focal_heatmap_loss(pred: Tensor, target: HeatmapTarget, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced pixel-wise focal loss normalised by the positive count."""
    if pred.shape != target.gaussians.shape:
        raise DimensionError(f"heatmap {pred.shape} vs target {target.gaussians.shape}")
    p = T.clamp(pred, 1e-6, 1 - 1e-6)
    dtype = pred.dtype
    pos = target.positive_mask.astype(dtype)
    neg_w = ((1.0 - target.gaussians) ** beta * (1.0 - pos)).astype(dtype)
    one_minus = 1.0 - p
    pos_term = T.power(one_minus, alpha) * T.log(p) * Tensor(pos)
    neg_term = T.power(p, alpha) * T.log(one_minus) * Tensor(neg_w)
    n_pos = max(1.0, float(pos.sum()))
    return -(pos_term + neg_term).sum() * (1.0 / n_pos)


def suppress_peaks(heat: np.ndarray) -> np.ndarray:
    """Keep values equal to the max of their 3x3 neighbourhood, zero the rest."""
    pad = [(0, 0)] * (heat.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(heat, pad, constant_values=-np.inf)
    hmax = sliding_window_view(padded, (3, 3), axis=(-2, -1)).max(axis=(-2, -1))
    return np.where(hmax == heat, heat, 0.0)


def top_peaks(heat: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k suppressed peaks of one classes×h×w map: (flat indices, scores), best first."""
    flat = suppress_peaks(heat).reshape(-1)
    k = min(k, flat.size)
    idx = np.argpartition(-flat, k - 1)[:k]
    order = np.lexsort((idx, -flat[idx]))
    idx = idx[order]
    return idx, flat[idx]


def scg_loss(pred: Tensor, k: int, threshold: float) -> Tensor:
    """-(1/B) * sum over images of sum of log t over top-k peaks with t > threshold.

    The indicator is a constant for differentiation: gradients reach only
    the selected above-threshold peaks.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    batched = pred.ndim == 4
    b = pred.shape[0] if batched else 1
    chosen = []
    for i in range(b):
        heat = pred.data[i] if batched else pred.data
        idx, score = top_peaks(heat, k)
        keep = idx[score > threshold]
        chosen.append(keep + i * heat.size)
    sel = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    if sel.size == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    t = T.getitem(pred.reshape(-1), sel)
    return -T.log(t).sum() * (1.0 / b)


def heatmap_loss(pred: Tensor, target: HeatmapTarget, cfg: LossWeightsConfig) -> Tensor:
    focal, scg = heatmap_loss_terms(pred, target, cfg)
    return focal + cfg.scg_lambda * scg


def heatmap_loss_terms(pred: Tensor, target: HeatmapTarget, cfg: LossWeightsConfig) -> tuple[Tensor, Tensor]:
    focal = focal_heatmap_loss(pred, target, cfg.focal_alpha, cfg.focal_beta)
    scg = scg_loss(pred, cfg.top_k, cfg.scg_threshold)
    return focal, scg


# ---------------------------------------------------------------------------
# regression losses


def l1_masked(pred: Tensor, target, mask=None) -> Tensor:
    """Mean absolute error over masked entries (0 for an empty mask)."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"l1: pred {pred.shape} vs target {target.shape}")
    m = np.ones(pred.shape, dtype=pred.dtype) if mask is None else np.broadcast_to(mask, pred.shape).astype(pred.dtype)
    count = float(m.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=pred.dtype)) + 0.0 * pred.sum()
    diff = T.absolute(pred - Tensor(target)) * Tensor(m)
    return diff.sum() * (1.0 / count)


def wrap_angle(a):
    """Map angles into [-pi, pi)."""
    return (np.asarray(a, dtype=np.float64) + math.pi) % (2 * math.pi) - math.pi


def multibin_encode(alpha) -> tuple[np.ndarray, np.ndarray]:
    """(bin index, residual normalised by half the bin width)."""
    a = wrap_angle(alpha)
    b = np.clip(np.floor((a + math.pi) / BIN_WIDTH).astype(np.int64), 0, NUM_BINS - 1)
    return b, (a - BIN_CENTERS[b]) / (BIN_WIDTH / 2)


def multibin_decode(theta: np.ndarray) -> np.ndarray:
    """Observation angle from n×24 outputs: argmax bin centre plus its residual."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 2 * NUM_BINS)
    b = theta[:, :NUM_BINS].argmax(axis=1)
    res = theta[np.arange(len(b)), NUM_BINS + b]
    return wrap_angle(BIN_CENTERS[b] + res * BIN_WIDTH / 2)


def multibin_loss(theta: Tensor, gt_alpha) -> Tensor:
    """Cross-entropy on the GT bin plus L1 on that bin's residual, mean over n."""
    n = theta.shape[0]
    if theta.shape != (n, 2 * NUM_BINS):
        raise DimensionError(f"theta must be n×{2 * NUM_BINS}, got {theta.shape}")
    if n == 0:
        return Tensor(np.zeros((), dtype=theta.dtype))
    b, res = multibin_encode(np.asarray(gt_alpha).reshape(-1))
    rows = np.arange(n)
    logp = T.log_softmax(theta[:, :NUM_BINS], axis=1)
    ce = -T.getitem(logp, (rows, b)).sum()
    pred_res = T.getitem(theta, (rows, NUM_BINS + b))
    reg = T.absolute(pred_res - Tensor(res.astype(theta.dtype))).sum()
    return (ce + reg) * (1.0 / n)


def laplacian_depth_loss(d_pred: Tensor, log_sigma: Tensor, d_gt) -> Tensor:
    """mean( sqrt(2)/sigma * |d_gt - d_pred| + log sigma ), log sigma clamped to [-10, 10]."""
    d_gt = np.asarray(d_gt, dtype=d_pred.dtype).reshape(d_pred.shape)
    if d_pred.shape[0] == 0:
        return Tensor(np.zeros((), dtype=d_pred.dtype))
    ls = T.clamp(log_sigma, -10.0, 10.0)
    inv_sigma = T.exp(T.neg(ls))
    per = math.sqrt(2.0) * inv_sigma * T.absolute(Tensor(d_gt) - d_pred) + ls
    return per.mean()


# ---------------------------------------------------------------------------
# total


REPORT_KEYS = ("focal", "scg", "heatmap", "o2d", "s2d", "o3d", "s3d", "theta", "depth", "total")


@dataclass
class LossReport:
    focal: float
    scg: float
    heatmap: float
    o2d: float
    s2d: float
    o3d: float
    s3d: float
    theta: float
    depth: float
    total: float
    step: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({"step": d.pop("step"), **d})

    def terms_sum(self) -> float:
        return self.heatmap + self.o2d + self.s2d + self.o3d + self.s3d + self.theta + self.depth


def total_loss(preds: dict, targets: dict, cfg: LossWeightsConfig, step: int = 0) -> tuple[Tensor, LossReport]:
    """L = (heatmap + L1 O2D + L1 S2D) + (L1 O3D + L1 S3D + multi-bin + Laplacian depth).

    ``preds`` keys: heatmap, o2d, s2d (gathered n×2 at object centres), o3d,
    s3d, theta, depth, log_sigma. ``targets`` keys: heatmap (HeatmapTarget),
    o2d, s2d, o3d, s3d, alpha, depth, mask (optional n-vector for 2D terms).
    """
    focal, scg = heatmap_loss_terms(preds["heatmap"], targets["heatmap"], cfg)
    hm = focal + cfg.scg_lambda * scg
    mask2d = targets.get("mask")
    if mask2d is not None:
        mask2d = np.asarray(mask2d).reshape(-1, 1)
    terms = {
        "o2d": l1_masked(preds["o2d"], targets["o2d"], mask2d),
        "s2d": l1_masked(preds["s2d"], targets["s2d"], mask2d),
        "o3d": l1_masked(preds["o3d"], targets["o3d"]),
        "s3d": l1_masked(preds["s3d"], targets["s3d"]),
        "theta": multibin_loss(preds["theta"], targets["alpha"]),
        "depth": laplacian_depth_loss(preds["depth"], preds["log_sigma"], targets["depth"]),
    }
    total = hm
    for key in ("o2d", "s2d", "o3d", "s3d", "theta", "depth"):
        total = total + terms[key]
    report = LossReport(
        focal=focal.item(),
        scg=scg.item(),
        heatmap=hm.item(),
        total=total.item(),
        step=step,
        **{k: v.item() for k, v in terms.items()},
    )
    return total, report
