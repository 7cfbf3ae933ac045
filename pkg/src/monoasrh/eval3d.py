"""Rotated-box IoU, greedy matching and AP at 40 recall positions."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .kitti_io import Difficulty, LabelRecord, classify_difficulty, meets_difficulty, MIN_HEIGHT

logger = logging.getLogger(__name__)

AREA_EPS = 1e-12
NUM_RECALL = 40
NEIGHBOR_CLASS = {"Car": "Van", "Pedestrian": "Person_sitting"}


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]  # x, y (bottom), z
    dims: tuple[float, float, float]  # h, w, l
    ry: float

    @classmethod
    def from_record(cls, rec: LabelRecord) -> "Box3D":
        return cls(tuple(rec.loc), tuple(rec.dims), rec.ry)


@dataclass
class EvalConfig:
    iou_threshold: dict = field(default_factory=lambda: {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5})
    metric: str = "3d"  # "3d" or "bev"
    dontcare_overlap: float = 0.5
    workers: int = 4

    def threshold(self, cls: str) -> float:
        if cls not in self.iou_threshold:
            raise ConfigError(f"no IoU threshold configured for class {cls!r}")
        return self.iou_threshold[cls]


# ---------------------------------------------------------------------------
# geometry


def bev_polygon(box: Box3D) -> np.ndarray:
    """Four (x, z) corners, counter-clockwise in the (x, z) plane."""
    x, _, z = box.center
    _, w, l = box.dims
    c, s = math.cos(box.ry), math.sin(box.ry)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, s], [-s, c]])
    return local @ rot.T + np.array([x, z])


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Intersect convex polygons by clipping ``subject`` against each edge of CCW ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        pts, out = out, []
        for j in range(len(pts)):
            cur, nxt = pts[j], pts[(j + 1) % len(pts)]
            sc, sn = side(cur), side(nxt)
            if sc >= 0:
                out.append(cur)
            if (sc >= 0) != (sn >= 0):
                t = sc / (sc - sn)
                out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def bev_intersection(a: Box3D, b: Box3D) -> float:
    area = polygon_area(clip_polygon(bev_polygon(a), bev_polygon(b)))
    return area if area > AREA_EPS else 0.0


def bev_iou(a: Box3D, b: Box3D) -> float:
    # order the pair canonically so the result is exactly symmetric
    if (a.center, a.dims, a.ry) > (b.center, b.dims, b.ry):
        a, b = b, a
    inter = bev_intersection(a, b)
    union = a.dims[1] * a.dims[2] + b.dims[1] * b.dims[2] - inter
    return 0.0 if union <= AREA_EPS else min(1.0, max(0.0, inter / union))


def iou_3d(a: Box3D, b: Box3D) -> float:
    if (a.center, a.dims, a.ry) > (b.center, b.dims, b.ry):
        a, b = b, a
    # y grows downwards; the box spans [y - h, y]
    top = max(a.center[1] - a.dims[0], b.center[1] - b.dims[0])
    bottom = min(a.center[1], b.center[1])
    overlap_h = bottom - top
    if overlap_h <= 0:
        return 0.0
    inter = bev_intersection(a, b) * overlap_h
    union = float(np.prod(a.dims)) + float(np.prod(b.dims)) - inter
    return 0.0 if union <= AREA_EPS else min(1.0, max(0.0, inter / union))


def box2d_overlap_on_first(a, b) -> float:
    """Area(a ∩ b) / area(a) for (left, top, right, bottom) boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    area = (a[2] - a[0]) * (a[3] - a[1])
    if iw <= 0 or ih <= 0 or area <= 0:
        return 0.0
    return iw * ih / area


# ---------------------------------------------------------------------------
# matching


def greedy_match(scores: Sequence[float], iou: np.ndarray, threshold: float) -> list[int]:
    """Score-ordered greedy assignment; returns GT index (or -1) per detection.

    Ties in score keep detection order; each detection takes the unmatched
    GT with the highest IoU >= threshold.
    """
    iou = np.asarray(iou, dtype=np.float64).reshape(len(scores), -1)
    assigned = [-1] * len(scores)
    taken = np.zeros(iou.shape[1], dtype=bool)
    for d in sorted(range(len(scores)), key=lambda i: (-scores[i], i)):
        cand = np.where(~taken & (iou[d] >= threshold), iou[d], -1.0)
        if cand.size and cand.max() >= 0:
            g = int(np.argmax(cand))
            assigned[d] = g
            taken[g] = True
    return assigned


def _pair_iou(det: LabelRecord, gt: LabelRecord, metric: str) -> float:
    a, b = Box3D.from_record(det), Box3D.from_record(gt)
    return iou_3d(a, b) if metric == "3d" else bev_iou(a, b)


@dataclass
class FrameResult:
    scores: list[float]  # scores of non-ignored detections
    tp: list[bool]
    num_gt: int


def match_frame(
    dets: Sequence[LabelRecord],
    gts: Sequence[LabelRecord],
    cls: str,
    difficulty: Difficulty,
    cfg: EvalConfig,
) -> FrameResult:
    """Classify every detection of ``cls`` in one frame as TP, FP or ignored."""
    thr = cfg.threshold(cls)
    neighbor = NEIGHBOR_CLASS.get(cls)
    valid, ignored, dontcare = [], [], []
    for g in gts:
        if g.type == cls:
            (valid if meets_difficulty(g, difficulty) else ignored).append(g)
        elif g.type == neighbor:
            ignored.append(g)
        elif g.type == "DontCare":
            dontcare.append(g)
    cand = [d for d in dets if d.type == cls and d.height_px >= MIN_HEIGHT[int(difficulty)]]
    order = sorted(range(len(cand)), key=lambda i: (-(cand[i].score or 0.0), i))
    used_valid = np.zeros(len(valid), dtype=bool)
    used_ign = np.zeros(len(ignored), dtype=bool)
    res = FrameResult([], [], len(valid))
    for i in order:
        d = cand[i]
        ious = np.array([_pair_iou(d, g, cfg.metric) for g in valid])
        ious = np.where(used_valid | (ious < thr), -1.0, ious) if ious.size else ious
        if ious.size and ious.max() >= 0:
            used_valid[int(np.argmax(ious))] = True
            res.scores.append(d.score or 0.0)
            res.tp.append(True)
            continue
        ig = np.array([_pair_iou(d, g, cfg.metric) for g in ignored])
        ig = np.where(used_ign | (ig < thr), -1.0, ig) if ig.size else ig
        if ig.size and ig.max() >= 0:
            used_ign[int(np.argmax(ig))] = True
            continue
        if any(box2d_overlap_on_first(d.bbox, g.bbox) > cfg.dontcare_overlap for g in dontcare):
            continue
        res.scores.append(d.score or 0.0)
        res.tp.append(False)
    return res


def match_and_score(frames, cls: str, difficulty: Difficulty, cfg: EvalConfig) -> tuple[np.ndarray, int]:
    """Match all frames; return (sorted TP flags, total valid GT count).

    ``frames`` is a sequence of (detections, ground truths) pairs.
    """
    cfg.threshold(cls)
    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        results = list(pool.map(lambda f: match_frame(f[0], f[1], cls, difficulty, cfg), frames))
    scores, tps, keys = [], [], []
    for fi, r in enumerate(results):
        for di, (s, t) in enumerate(zip(r.scores, r.tp)):
            scores.append(s)
            tps.append(t)
            keys.append((fi, di))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], keys[i]))
    return np.array([tps[i] for i in order], dtype=bool), sum(r.num_gt for r in results)


def precision_recall(tp_sorted: np.ndarray, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(tp_sorted)
    ranks = np.arange(1, len(tp_sorted) + 1)
    return tp / ranks, tp / max(num_gt, 1)


def average_precision_r40(tp_sorted: np.ndarray, num_gt: int) -> float:
    """Mean over r in {1/40, ..., 1} of the best precision at recall >= r, in percent."""
    if num_gt == 0:
        logger.warning("AP requested with zero ground truths; reporting 0")
        return 0.0
    tp_sorted = np.asarray(tp_sorted, dtype=bool)
    if tp_sorted.size == 0:
        return 0.0
    tp = np.cumsum(tp_sorted)
    prec = tp / np.arange(1, len(tp) + 1)
    total = 0.0
    for i in range(1, NUM_RECALL + 1):
        # recall >= i/40  <=>  40 * tp >= i * num_gt (exact in integers)
        ok = NUM_RECALL * tp >= i * num_gt
        if ok.any():
            total += prec[ok].max()
    return 100.0 * total / NUM_RECALL


def evaluate(frames, classes=("Car", "Pedestrian", "Cyclist"), cfg: EvalConfig | None = None) -> dict:
    """{class: {Easy|Moderate|Hard: {ap3d, apbev}}} for (dets, gts) frame pairs."""
    cfg = cfg or EvalConfig()
    report = {}
    for cls in classes:
        report[cls] = {}
        for level in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
            entry = {}
            for metric, key in (("3d", "ap3d"), ("bev", "apbev")):
                sub = EvalConfig(cfg.iou_threshold, metric, cfg.dontcare_overlap, cfg.workers)
                tps, n = match_and_score(frames, cls, level, sub)
                entry[key] = average_precision_r40(tps, n)
            entry["num_gt"] = n
            report[cls][level.label] = entry
    return report


# ---------------------------------------------------------------------------
# confidence histograms


def confidence_histogram(frames, iou_min: float = 0.5, bins: int = 10) -> dict[str, np.ndarray]:
    """Score histograms of detections whose best same-class GT has 3D IoU > iou_min.

    Split by the matched GT's difficulty; bins evenly cover [0, 1].
    """
    hist = {lvl.label: np.zeros(bins, dtype=np.int64) for lvl in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)}
    edges = np.linspace(0.0, 1.0, bins + 1)
    for dets, gts in frames:
        for cls in {d.type for d in dets}:
            d_cls = [d for d in dets if d.type == cls]
            g_cls = [g for g in gts if g.type == cls]
            if not g_cls:
                continue
            iou = np.array([[_pair_iou(d, g, "3d") for g in g_cls] for d in d_cls])
            iou = np.where(iou > iou_min, iou, -1.0)
            assigned = greedy_match([d.score or 0.0 for d in d_cls], iou, 0.0)
            for d, g in zip(d_cls, assigned):
                if g < 0:
                    continue
                level = classify_difficulty(g_cls[g])
                if level == Difficulty.IGNORED:
                    continue
                b = min(int(np.searchsorted(edges, d.score or 0.0, side="right")) - 1, bins - 1)
                hist[level.label][max(b, 0)] += 1
    return hist


def histogram_csv(hist: dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    levels = list(hist)
    bins = len(next(iter(hist.values()))) if hist else 0
    writer.writerow(["bin_lo", "bin_hi", *levels])
    for i in range(bins):
        writer.writerow([f"{i / bins:.3f}", f"{(i + 1) / bins:.3f}", *(int(hist[l][i]) for l in levels)])
    return buf.getvalue()
