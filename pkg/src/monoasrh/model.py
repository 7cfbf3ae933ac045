"""Toy end-to-end detector: backbone stub, aggregator, 2D heads, peak decoding,
RoI assembly and the scale-aware 3D head; plus synthetic scenes to train it on."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .asrh import RoiBatch, ScaleAwareHead, roi_align
from .ehfam import Aggregator, EhfamConfig, FeaturePyramid
from .errors import ConfigError, ContractError, DimensionError
from .eval3d import Box3D
from .kitti_io import CLASS_NAMES, CalibRecord, LabelRecord
from .losses import (
    HeatmapTarget,
    draw_gaussian,
    gaussian_radius,
    multibin_decode,
    top_peaks,
    wrap_angle,
)
from .nn import Conv2d, Module, make_rng
from .tensor import Tensor

STRIDE = 4
HEATMAP_PRIOR_BIAS = -2.19


@dataclass
class DetectorConfig:
    height: int = 128
    width: int = 384
    channels: int = 64
    num_classes: int = 3
    top_k: int = 50
    score_threshold: float = 0.2
    seed: int = 42
    heads: int = 8
    value_dim: int = 128
    head_channels: int = 8  # hidden width of each 2D head

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.height < 64 or self.width < 64 or self.height % 32 or self.width % 32:
            raise ConfigError("input height/width must be >= 64 and divisible by 32")

    @property
    def map_size(self) -> tuple[int, int]:
        return self.height // STRIDE, self.width // STRIDE


@dataclass
class Detection:
    class_id: int
    score: float
    box2d: tuple[float, float, float, float]
    box3d: Box3D
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"score {self.score} outside [0, 1]")
        if self.box3d.center[2] <= 0 or min(self.box3d.dims) <= 0:
            raise ContractError("detections need z > 0 and positive dimensions")

    def to_record(self) -> LabelRecord:
        return LabelRecord(
            type=CLASS_NAMES[self.class_id],
            truncated=0.0,
            occluded=0,
            alpha=float(self.alpha),
            bbox=tuple(float(v) for v in self.box2d),
            dims=tuple(float(v) for v in self.box3d.dims),
            loc=tuple(float(v) for v in self.box3d.center),
            ry=float(self.box3d.ry),
            score=float(self.score),
        )


# ---------------------------------------------------------------------------
# camera geometry


def project(P2: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Camera-frame points (..., 3) -> pixel coordinates (..., 2)."""
    pts = np.asarray(points, dtype=np.float64)
    hom = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ np.asarray(P2).T
    return hom[..., :2] / hom[..., 2:3]


def unproject(P2: np.ndarray, u: float, v: float, z: float) -> np.ndarray:
    """Camera-frame point with depth ``z`` that projects to pixel (u, v)."""
    P = np.asarray(P2, dtype=np.float64)
    # u * (P[2] . X) = P[0] . X  and likewise for v, linear in the unknown x, y
    a = np.array([[P[0, 0] - u * P[2, 0], P[0, 1] - u * P[2, 1]], [P[1, 0] - v * P[2, 0], P[1, 1] - v * P[2, 1]]])
    rhs = -np.array(
        [
            (P[0, 2] - u * P[2, 2]) * z + P[0, 3] - u * P[2, 3],
            (P[1, 2] - v * P[2, 2]) * z + P[1, 3] - v * P[2, 3],
        ]
    )
    x, y = np.linalg.solve(a, rhs)
    return np.array([x, y, z])


def box_corners(box: Box3D) -> np.ndarray:
    """Eight camera-frame corners of a bottom-centred box."""
    x, y, z = box.center
    h, w, l = box.dims
    c, s = math.cos(box.ry), math.sin(box.ry)
    xs = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * l / 2
    zs = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * w / 2
    ys = np.array([0, 0, 0, 0, -h, -h, -h, -h], dtype=np.float64)
    return np.stack([x + c * xs + s * zs, y + ys, z - s * xs + c * zs], axis=1)


# ---------------------------------------------------------------------------
# synthetic scenes

SYNTH_FOCAL = 250.0
CLASS_DIMS = {"Car": (1.53, 1.63, 3.88), "Pedestrian": (1.76, 0.66, 0.84), "Cyclist": (1.74, 0.60, 1.76)}
CLASS_TINT = {"Car": 0.9, "Pedestrian": 0.6, "Cyclist": 0.3}
CAMERA_HEIGHT = 1.65


def synthetic_calib(height: int = 128, width: int = 384) -> CalibRecord:
    cx, cy = width / 2.0, height * 5.0 / 16.0
    return CalibRecord(np.array([[SYNTH_FOCAL, 0, cx, 0], [0, SYNTH_FOCAL, cy, 0], [0, 0, 1, 0]], dtype=np.float64))


def synth_scene(
    seed: int,
    n_objects: int = 3,
    height: int = 128,
    width: int = 384,
    classes: tuple[str, ...] = ("Car",),
) -> tuple[np.ndarray, list[LabelRecord], CalibRecord]:
    """Render flat-shaded 2D projections of random 3D boxes.

    Objects stand on a ground plane at depth 5-40 m, drawn uniformly in
    1/z, with non-overlapping 2D boxes fully inside the image. Colour encodes the class (red) and the
    observation angle (green = cos, blue = sin), so every label is
    recoverable from pixels.
    """
    if n_objects > 8:
        raise ConfigError("at most 8 objects per synthetic scene")
    rng = make_rng(seed)
    calib = synthetic_calib(height, width)
    image = np.full((3, height, width), 0.2) + rng.normal(0.0, 0.01, (3, height, width))
    labels: list[LabelRecord] = []
    boxes2d: list[tuple[np.ndarray, float]] = []
    tries = misses = 0
    while len(labels) < n_objects:
        tries += 1
        if tries > 20000:
            raise RuntimeError(f"could not place {n_objects} objects (seed {seed})")
        if misses > 1000:
            # early objects can crowd out the rest; start the layout over
            labels, boxes2d, misses = [], [], 0
        cls = classes[int(rng.integers(len(classes)))]
        base = np.array(CLASS_DIMS[cls])
        dims = tuple(np.round(base * rng.uniform(0.95, 1.05, 3), 2))
        # uniform in inverse depth (i.e. in apparent size); a crowded layout
        # moves the near limit back so smaller objects can still fit
        z_near = 5.0 + 35.0 * min(misses / 50.0, 0.9)
        z = round(1.0 / float(rng.uniform(1.0 / 40.0, 1.0 / z_near)), 2)
        x = round(float(rng.uniform(-0.45, 0.45) * z * width / SYNTH_FOCAL), 2)
        y = round(CAMERA_HEIGHT + float(rng.uniform(-0.15, 0.15)), 2)
        ry = round(float(rng.uniform(-math.pi, math.pi)), 2)
        box = Box3D((x, y, z), dims, ry)
        uv = project(calib.P2, box_corners(box))
        b2 = np.array([uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max()])
        if b2[0] < 0 or b2[1] < 0 or b2[2] > width - 1 or b2[3] > height - 1:
            misses += 1
            continue
        if any(_overlaps(b2, other) for other, _ in boxes2d):
            misses += 1
            continue
        misses = 0
        alpha = float(wrap_angle(ry - math.atan2(x, z)))
        boxes2d.append((b2, alpha))
        labels.append(
            LabelRecord(
                type=cls,
                truncated=0.0,
                occluded=0,
                alpha=round(alpha, 2),
                bbox=tuple(round(float(v), 2) for v in b2),
                dims=dims,
                loc=(x, y, z),
                ry=ry,
            )
        )
    for rec, ((x1, y1, x2, y2), alpha) in zip(labels, boxes2d):
        r0, c0 = int(math.floor(y1)), int(math.floor(x1))
        r1, c1 = int(math.ceil(y2)), int(math.ceil(x2))
        color = np.array([CLASS_TINT[rec.type], 0.5 + 0.4 * math.cos(alpha), 0.5 + 0.4 * math.sin(alpha)])
        image[:, r0:r1, c0:c1] = color[:, None, None]
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels, calib


def _overlaps(a: np.ndarray, b: np.ndarray, margin: float = 2.0) -> bool:
    return not (a[2] + margin < b[0] or b[2] + margin < a[0] or a[3] + margin < b[1] or b[3] + margin < a[1])


# ---------------------------------------------------------------------------
# network


class BackboneStub(Module):
    """Patchify stem (4x4 conv, stride 4) then three 2x2 stride-2 stages; Mish throughout."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.stem = Conv2d(3, channels, 4, rng, stride=4, padding=0)
        self.stages = [Conv2d(channels, channels, 2, rng, stride=2, padding=0) for _ in range(3)]

    def forward(self, image: Tensor) -> FeaturePyramid:
        x = image if image.ndim == 4 else image.reshape(1, *image.shape)
        if x.shape[1] != 3 or x.shape[2] % 32 or x.shape[3] % 32:
            raise DimensionError(f"backbone expects N×3×H×W with H, W divisible by 32, got {x.shape}")
        s = [T.mish(self.stem(x))]
        for conv in self.stages:
            s.append(T.mish(conv(s[-1])))
        return FeaturePyramid(*s)


class Heads2D(Module):
    """Heatmap (sigmoid), 2D centre offset (x, y) and 2D size (w, h) in map units.

    Each head is conv3x3 -> ReLU -> conv1x1 with its own weights. The three
    3x3 convs are stacked along output channels so they share one im2col.
    """

    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator):
        c, hc = cfg.channels, cfg.head_channels
        self.hidden = hc
        self.conv = Conv2d(c, 3 * hc, 3, rng)
        self.heatmap = Conv2d(hc, cfg.num_classes, 1, rng)
        self.heatmap.bias.data[:] = HEATMAP_PRIOR_BIAS
        self.offset = Conv2d(hc, 2, 1, rng)
        self.size = Conv2d(hc, 2, 1, rng)

    def forward(self, f: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h = T.relu(self.conv(f))
        k = self.hidden
        heat = T.sigmoid(self.heatmap(h[:, :k]))
        return heat, self.offset(h[:, k : 2 * k]), self.size(h[:, 2 * k :])


@dataclass
class Candidate2D:
    class_id: int
    score: float
    cell: tuple[int, int]  # (ix, iy) on the stride-4 map
    center: tuple[float, float]  # (u, v) pixels
    size: tuple[float, float]  # (w, h) pixels

    @property
    def box(self) -> tuple[float, float, float, float]:
        (u, v), (w, h) = self.center, self.size
        return (u - w / 2, v - h / 2, u + w / 2, v + h / 2)


def decode_heatmap(heatmap, offset, size, k: int = 50, score_threshold: float = 0.2) -> list[Candidate2D]:
    """3x3 peak suppression, top-k over all classes, boxes from offset/size maps."""
    heat = np.asarray(heatmap.data if isinstance(heatmap, Tensor) else heatmap)
    off = np.asarray(offset.data if isinstance(offset, Tensor) else offset)
    siz = np.asarray(size.data if isinstance(size, Tensor) else size)
    ncls, h, w = heat.shape
    idx, scores = top_peaks(heat, k)
    out = []
    for flat, score in zip(idx, scores):
        if score < score_threshold or score <= 0:
            continue
        c, rem = divmod(int(flat), h * w)
        iy, ix = divmod(rem, w)
        cu = (ix + off[0, iy, ix]) * STRIDE
        cv = (iy + off[1, iy, ix]) * STRIDE
        bw = max(float(siz[0, iy, ix]) * STRIDE, 1e-3)
        bh = max(float(siz[1, iy, ix]) * STRIDE, 1e-3)
        out.append(Candidate2D(c, float(score), (ix, iy), (float(cu), float(cv)), (bw, bh)))
    return out


class ToyDetector(Module):
    def __init__(self, cfg: DetectorConfig):
        rng = make_rng(cfg.seed)
        self.cfg = cfg
        self.backbone = BackboneStub(cfg.channels, rng)
        self.aggregator = Aggregator(EhfamConfig(cfg.channels, cfg.heads, cfg.value_dim), rng)
        self.heads2d = Heads2D(cfg, rng)
        self.head3d = ScaleAwareHead(cfg.channels, rng)

    def features(self, images: Tensor) -> Tensor:
        return self.aggregator(self.backbone(images))

    def roi_batch(self, f: Tensor, boxes_px: np.ndarray, batch_index: np.ndarray) -> RoiBatch:
        boxes_px = np.asarray(boxes_px, dtype=np.float64).reshape(-1, 4)
        feats, degenerate = roi_align(f, boxes_px / STRIDE, batch_index)
        sizes = np.stack([boxes_px[:, 2] - boxes_px[:, 0], boxes_px[:, 3] - boxes_px[:, 1]], axis=1)
        sizes = np.maximum(sizes, 1e-3)
        return RoiBatch(feats, Tensor(sizes.astype(f.dtype)), boxes_px / STRIDE, (self.cfg.width, self.cfg.height), degenerate)

    def predict(self, image: np.ndarray, calib: CalibRecord | None) -> list[Detection]:
        """Full inference on one 3×H×W image."""
        if calib is None:
            raise ContractError("inference needs a calibration (P2)")
        f = self.features(Tensor(np.asarray(image, dtype=T.default_dtype())[None]))
        heat, off, siz = self.heads2d(f)
        cands = decode_heatmap(heat.data[0], off.data[0], siz.data[0], self.cfg.top_k, self.cfg.score_threshold)
        if not cands:
            return []
        boxes = np.array([c.box for c in cands])
        roi = self.roi_batch(f, boxes, np.zeros(len(cands), dtype=np.int64))
        out = self.head3d(roi)
        depth, log_sigma = out.aggregated_depth()
        alphas = multibin_decode(out.theta.data)
        dets = []
        for i, c in enumerate(cands):
            z = float(depth.data[i])
            u = (c.center[0] / STRIDE + float(out.o3d.data[i, 0])) * STRIDE
            v = (c.center[1] / STRIDE + float(out.o3d.data[i, 1])) * STRIDE
            x, yc, _ = unproject(calib.P2, u, v, z)
            h, w, l = (max(float(d), 0.05) for d in out.s3d.data[i])
            alpha = float(alphas[i])
            ry = float(wrap_angle(alpha + math.atan2(x, z)))
            sigma = math.exp(float(np.clip(log_sigma.data[i], -10, 10)))
            score = c.score * math.exp(-sigma)
            x1, y1, x2, y2 = c.box
            box2d = (max(x1, 0.0), max(y1, 0.0), min(x2, self.cfg.width - 1.0), min(y2, self.cfg.height - 1.0))
            dets.append(Detection(c.class_id, float(np.clip(score, 0, 1)), box2d, Box3D((x, yc + h / 2, z), (h, w, l), ry), alpha))
        return dets


# ---------------------------------------------------------------------------
# training targets


@dataclass
class SceneTargets:
    heatmap: HeatmapTarget
    index: tuple[np.ndarray, np.ndarray, np.ndarray]  # (batch, iy, ix) of object centres
    o2d: np.ndarray
    s2d: np.ndarray
    boxes_px: np.ndarray
    batch_index: np.ndarray
    o3d: np.ndarray
    s3d: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    classes: np.ndarray = field(default=None)


def build_targets(labels_per_image, calibs, cfg: DetectorConfig) -> SceneTargets:
    mh, mw = cfg.map_size
    b = len(labels_per_image)
    heat = np.zeros((b, cfg.num_classes, mh, mw), dtype=np.float64)
    pos = np.zeros_like(heat, dtype=bool)
    rows = {k: [] for k in ("b", "iy", "ix", "o2d", "s2d", "box", "o3d", "s3d", "alpha", "depth", "cls")}
    for bi, (labels, calib) in enumerate(zip(labels_per_image, calibs)):
        for rec in labels:
            if rec.type not in CLASS_NAMES[: cfg.num_classes]:
                continue
            cls = CLASS_NAMES.index(rec.type)
            x1, y1, x2, y2 = rec.bbox
            cx, cy = (x1 + x2) / 2 / STRIDE, (y1 + y2) / 2 / STRIDE
            ix, iy = int(cx), int(cy)
            if not (0 <= ix < mw and 0 <= iy < mh):
                continue
            bw, bh = (x2 - x1) / STRIDE, (y2 - y1) / STRIDE
            radius = max(0, int(gaussian_radius(bh, bw, 0.7)))
            draw_gaussian(heat[bi, cls], (ix, iy), radius)
            pos[bi, cls, iy, ix] = True
            h, w, l = rec.dims
            center3d = np.array([rec.loc[0], rec.loc[1] - h / 2, rec.loc[2]])
            proj = project(calib.P2, center3d) / STRIDE
            rows["b"].append(bi)
            rows["iy"].append(iy)
            rows["ix"].append(ix)
            rows["o2d"].append((cx - ix, cy - iy))
            rows["s2d"].append((bw, bh))
            rows["box"].append(rec.bbox)
            rows["o3d"].append((proj[0] - cx, proj[1] - cy))
            rows["s3d"].append(rec.dims)
            rows["alpha"].append(rec.alpha)
            rows["depth"].append(rec.loc[2])
            rows["cls"].append(cls)
    arr = {k: np.asarray(v, dtype=np.float64) for k, v in rows.items()}
    ints = {k: np.asarray(rows[k], dtype=np.int64) for k in ("b", "iy", "ix", "cls")}
    heat[pos] = 1.0
    return SceneTargets(
        heatmap=HeatmapTarget(heat, pos),
        index=(ints["b"], ints["iy"], ints["ix"]),
        o2d=arr["o2d"].reshape(-1, 2),
        s2d=arr["s2d"].reshape(-1, 2),
        boxes_px=arr["box"].reshape(-1, 4),
        batch_index=ints["b"],
        o3d=arr["o3d"].reshape(-1, 2),
        s3d=arr["s3d"].reshape(-1, 3),
        alpha=arr["alpha"],
        depth=arr["depth"],
        classes=ints["cls"],
    )


def predicted_boxes(offset: np.ndarray, size: np.ndarray, index) -> np.ndarray:
    """Pixel boxes (x1, y1, x2, y2) read from the 2D offset/size maps at the given cells."""
    b, iy, ix = index
    cu = (ix + offset[b, 0, iy, ix]) * STRIDE
    cv = (iy + offset[b, 1, iy, ix]) * STRIDE
    bw = np.maximum(size[b, 0, iy, ix] * STRIDE, 1e-3)
    bh = np.maximum(size[b, 1, iy, ix] * STRIDE, 1e-3)
    return np.stack([cu - bw / 2, cv - bh / 2, cu + bw / 2, cv + bh / 2], axis=1).astype(np.float64)


def forward_train(model: ToyDetector, images: np.ndarray, targets: SceneTargets) -> dict:
    """Predictions keyed as :func:`monoasrh.losses.total_loss` expects."""
    f = model.features(Tensor(np.asarray(images, dtype=T.default_dtype())))
    heat, off, siz = model.heads2d(f)
    b, iy, ix = targets.index
    gather = (b, slice(None), iy, ix)
    # the 3D head sees boxes decoded from the 2D heads, as it will at inference
    roi = model.roi_batch(f, predicted_boxes(off.data, siz.data, targets.index), targets.batch_index)
    out = model.head3d(roi)
    depth, log_sigma = out.aggregated_depth()
    return {
        "heatmap": heat,
        "o2d": T.getitem(off, gather),
        "s2d": T.getitem(siz, gather),
        "o3d": out.o3d,
        "s3d": out.s3d,
        "theta": out.theta,
        "depth": depth,
        "log_sigma": log_sigma,
    }


def loss_targets(targets: SceneTargets) -> dict:
    heat = HeatmapTarget(targets.heatmap.gaussians.astype(T.default_dtype()), targets.heatmap.positive_mask)
    return {
        "heatmap": heat,
        "o2d": targets.o2d,
        "s2d": targets.s2d,
        "o3d": targets.o3d,
        "s3d": targets.s3d,
        "alpha": targets.alpha,
        "depth": targets.depth,
    }
