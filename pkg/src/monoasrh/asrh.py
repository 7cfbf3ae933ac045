"""Scale-aware 3D regression head operating on RoI-aligned features."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import BatchNorm, Conv2d, Linear, Module, param
from .tensor import Tensor

ROI_SIZE = 7
SCALE_DIM = 32
NUM_BINS = 12
# 3x3 kernel taps in row-major order, as (dy, dx)
TAPS = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)


@dataclass
class RoiBatch:
    features: Tensor  # n×C×7×7
    sizes: Tensor  # n×2, box (width, height) in input pixels
    boxes: np.ndarray  # n×4 (x1, y1, x2, y2) on the stride-4 map
    image_size: tuple[int, int] = (384, 128)  # (width, height) in pixels
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        n = self.features.shape[0]
        if self.sizes.shape != (n, 2) or len(self.boxes) != n:
            raise DimensionError("RoI features, sizes and boxes disagree on n")
        if n and np.any(self.sizes.data <= 0):
            raise ContractError("RoI sizes must be strictly positive")


@dataclass
class Head3dOutput:
    s3d: Tensor  # n×3 (h, w, l) metres
    o3d: Tensor  # n×2 projected-centre offset, stride-4 px
    theta: Tensor  # n×24: 12 bin logits then 12 residuals
    depth: Tensor  # n×7×7 metres
    depth_unc: Tensor  # n×7×7 log-sigma
    depth_map: Tensor  # n×7×7 attention logits

    def aggregated_depth(self) -> tuple[Tensor, Tensor]:
        """Softmax(depth_map)-weighted depth and log-sigma, one value per RoI."""
        n = self.depth.shape[0]
        w = T.softmax(self.depth_map.reshape(n, -1), axis=1)
        depth = (w * self.depth.reshape(n, -1)).sum(axis=1)
        log_sigma = (w * self.depth_unc.reshape(n, -1)).sum(axis=1)
        return depth, log_sigma


def roi_align(
    feature: Tensor,
    boxes: np.ndarray,
    batch_index: np.ndarray | None = None,
    output_size: int = ROI_SIZE,
    sampling_ratio: int = 2,
) -> tuple[Tensor, np.ndarray]:
    """Average of ``sampling_ratio``² bilinear samples per output bin.

    ``boxes`` are (x1, y1, x2, y2) in map units where pixel i spans [i, i+1).
    Returns (n×C×d×d features, boolean mask of degenerate boxes, which get
    zero features).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    fmap = feature if feature.ndim == 4 else feature.reshape(1, *feature.shape)
    _, c, h, w = fmap.shape
    n = len(boxes)
    d, s = output_size, sampling_ratio
    if n == 0:
        return T.zeros((0, c, d, d)), np.zeros(0, dtype=bool)
    if batch_index is None:
        batch_index = np.zeros(n, dtype=np.int64)
    clipped = boxes.copy()
    clipped[:, [0, 2]] = clipped[:, [0, 2]].clip(0, w)
    clipped[:, [1, 3]] = clipped[:, [1, 3]].clip(0, h)
    bw = clipped[:, 2] - clipped[:, 0]
    bh = clipped[:, 3] - clipped[:, 1]
    degenerate = (bw <= 0) | (bh <= 0)

    frac = (np.arange(d * s) + 0.5) / (d * s)
    ys = clipped[:, 1:2] + frac[None] * bh[:, None] - 0.5
    xs = clipped[:, 0:1] + frac[None] * bw[:, None] - 0.5
    grid_y = np.broadcast_to(ys[:, :, None], (n, d * s, d * s))
    grid_x = np.broadcast_to(xs[:, None, :], (n, d * s, d * s))
    # border samples are clamped onto the map rather than read as padding
    grid_y = grid_y.clip(0, h - 1)
    grid_x = grid_x.clip(0, w - 1)
    points = np.stack([grid_y, grid_x], axis=-1).reshape(n, -1, 2)
    points[degenerate] = -1e4

    sampled = T.bilinear_sample(fmap, Tensor(points.astype(fmap.dtype)), batch_index)
    sampled = sampled.reshape(n, c, d, s, d, s)
    return sampled.mean(axis=(3, 5)), degenerate


class ScaleEncoder(Module):
    """MLP 2 -> 64 -> 32 on normalised box sizes, tiled over the RoI grid."""

    def __init__(self, rng: np.random.Generator, hidden: int = 64, out: int = SCALE_DIM):
        self.fc1 = Linear(2, hidden, rng)
        self.fc2 = Linear(hidden, out, rng)
        self.out = out

    def encode(self, sizes: Tensor, image_size: tuple[int, int]) -> Tensor:
        if sizes.shape[0] and np.any(sizes.data <= 0):
            raise ContractError("box sizes must be strictly positive")
        norm = Tensor(np.array([1.0 / image_size[0], 1.0 / image_size[1]], dtype=sizes.dtype))
        x = T.mul(sizes, T.expand(norm, sizes.shape))
        return self.fc2(T.mish(self.fc1(x)))

    def forward(self, sizes: Tensor, image_size: tuple[int, int], grid: int = ROI_SIZE) -> Tensor:
        g = self.encode(sizes, image_size)
        n = g.shape[0]
        return T.expand(g.reshape(n, self.out, 1, 1), (n, self.out, grid, grid))


class SemanticRefiner(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv_a = Conv2d(channels, channels, 3, rng)
        self.conv_b = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv_b(T.relu(self.conv_a(x)))


class OffsetGenerator(Module):
    """[Go, FR] -> conv3x3 -> ReLU -> conv1x1 -> 18 offset channels (dy, dx per tap)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv_a = Conv2d(channels + SCALE_DIM, channels, 3, rng)
        self.conv_b = Conv2d(channels, 18, 1, rng, zero_init=True)

    def forward(self, go: Tensor, fr: Tensor) -> Tensor:
        return self.conv_b(T.relu(self.conv_a(T.concat([go, fr], axis=1))))


class VarianceAttention(Module):
    """Spatial-variance attention Y and the 9-channel modulation mask M."""

    def __init__(self, channels: int, rng: np.random.Generator, lam: float = 1e-4):
        self.proj = Conv2d(channels, channels, 1, rng)
        self.mask_conv = Conv2d(channels, 9, 1, rng)
        self.lam = lam

    def argument(self, fr: Tensor) -> Tensor:
        """V / (sum(V)/(d*d-1) + lambda) + 0.5, per RoI and channel."""
        n, c, h, w = fr.shape
        if h * w <= 1:
            raise ContractError("variance attention needs more than one spatial cell")
        mu = fr.mean(axis=(2, 3), keepdims=True)
        dev = fr - T.expand(mu, fr.shape)
        var = dev * dev
        denom = var.sum(axis=(2, 3), keepdims=True) * (1.0 / (h * w - 1)) + self.lam
        return var / T.expand(denom, fr.shape) + 0.5

    def forward(self, fr: Tensor) -> tuple[Tensor, Tensor]:
        y = T.sigmoid(self.proj(self.argument(fr)))
        m = T.sigmoid(self.mask_conv(fr * y))
        return y, m


def deform_columns(fr: Tensor, offsets: Tensor, mask: Tensor) -> Tensor:
    """Mask-modulated deformable samples as an (n*h*w)×(c*9) column matrix.

    Column layout matches ``weight.reshape(o, c*9)`` of a 3x3 kernel, so any
    number of kernels can share one sampling pass.
    """
    n, c, h, w = fr.shape
    if offsets.shape != (n, 18, h, w) or mask.shape != (n, 9, h, w):
        raise DimensionError(f"offsets {offsets.shape} / mask {mask.shape} do not match input {fr.shape}")
    hw = h * w
    py, px = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base = np.empty((9, hw, 2))
    base[:, :, 0] = py.reshape(1, -1) + TAPS[:, :1]
    base[:, :, 1] = px.reshape(1, -1) + TAPS[:, 1:]
    base = Tensor(np.broadcast_to(base, (n, 9, hw, 2)).astype(fr.dtype))
    off = offsets.reshape(n, 9, 2, hw).transpose(0, 1, 3, 2)
    points = (base + off).reshape(n, 9 * hw, 2)
    sampled = T.bilinear_sample(fr, points).reshape(n, c, 9, hw)
    modulated = sampled * T.expand(mask.reshape(n, 1, 9, hw), (n, c, 9, hw))
    return modulated.reshape(n, c * 9, hw).transpose(0, 2, 1).reshape(n * hw, c * 9)


def _deform_apply(cols: Tensor, shape: tuple, weight: Tensor, bias: Tensor | None) -> Tensor:
    n, c, h, w = shape
    o = weight.shape[0]
    if weight.shape != (o, c, 3, 3):
        raise DimensionError(f"deform weight {weight.shape} does not match {c} input channels")
    out = cols @ weight.reshape(o, c * 9).transpose(1, 0)
    if bias is not None:
        out = T.bias_add(out, bias, axis=1)
    return out.reshape(n, h, w, o).transpose(0, 3, 1, 2)


def modulated_deform_conv(
    fr: Tensor, offsets: Tensor, mask: Tensor, weight: Tensor, bias: Tensor | None = None
) -> Tensor:
    """3x3 modulated deformable convolution, stride 1, padding 1.

    out(p) = sum_k mask_k(p) * W_k * fr(p + tap_k + offset_k(p)), sampled
    bilinearly with zero padding. ``offsets`` channel 2k is dy and 2k+1 is dx
    of tap k (taps in row-major order).
    """
    c = fr.shape[1]
    if weight.ndim != 4 or weight.shape[1:] != (c, 3, 3):
        raise DimensionError(f"deform weight {weight.shape} does not match {c} input channels")
    return _deform_apply(deform_columns(fr, offsets, mask), fr.shape, weight, bias)


class AttentiveNorm(Module):
    """Standardisation followed by an instance-specific mixture of K affine transforms."""

    def __init__(self, channels: int, rng: np.random.Generator, k: int = 5):
        self.norm = BatchNorm(channels, affine=False)
        self.attn = Linear(channels, k, rng)
        self.gamma = param(1.0 + 0.1 * rng.standard_normal((k, channels)))
        self.beta = param(0.1 * rng.standard_normal((k, channels)))
        self.k = k

    def mixture_weights(self, x: Tensor) -> Tensor:
        return T.softmax(self.attn(x.mean(axis=(2, 3))), axis=1)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if n == 0:
            return x
        xhat = self.norm(x)
        lam = self.mixture_weights(x)
        scale = (lam @ self.gamma).reshape(n, c, 1, 1)
        shift = (lam @ self.beta).reshape(n, c, 1, 1)
        return xhat * T.expand(scale, x.shape) + T.expand(shift, x.shape)


def attentive_norm(fde: Tensor, weights: AttentiveNorm) -> Tensor:
    return weights(fde)


class RegressionBranch(Module):
    """Deformable conv -> attentive norm -> LeakyReLU -> 1x1 conv."""

    def __init__(self, channels: int, out_channels: int, rng: np.random.Generator, out_bias=None):
        bound = 1.0 / math.sqrt(channels * 9)
        self.deform_weight = param(rng.uniform(-bound, bound, (channels, channels, 3, 3)))
        self.deform_bias = param(np.zeros(channels))
        self.norm = AttentiveNorm(channels, rng)
        self.out = Conv2d(channels, out_channels, 1, rng)
        if out_bias is not None:
            self.out.bias.data = np.asarray(out_bias, dtype=self.out.bias.dtype) * np.ones(out_channels, self.out.bias.dtype)

    def forward(self, fr: Tensor, offsets: Tensor, mask: Tensor) -> Tensor:
        x = modulated_deform_conv(fr, offsets, mask, self.deform_weight, self.deform_bias)
        return self.finish(x)

    def from_columns(self, cols: Tensor, shape: tuple) -> Tensor:
        return self.finish(_deform_apply(cols, shape, self.deform_weight, self.deform_bias))

    def finish(self, x: Tensor) -> Tensor:
        return self.out(T.leaky_relu(self.norm(x), 0.01))


# car mean dimensions (h, w, l) give the size branch a sensible starting point
SIZE_PRIOR = (1.53, 1.63, 3.88)
DEPTH_PRIOR = 20.0


class ScaleAwareHead(Module):
    """Shared scale-semantic fusion feeding six parallel regression branches."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.scale_encoder = ScaleEncoder(rng)
        self.refine = SemanticRefiner(channels, rng)
        self.offsets = OffsetGenerator(channels, rng)
        self.variance = VarianceAttention(channels, rng)
        self.branch_s3d = RegressionBranch(channels, 3, rng)
        self.branch_o3d = RegressionBranch(channels, 2, rng)
        self.branch_theta = RegressionBranch(channels, 2 * NUM_BINS, rng)
        self.branch_depth = RegressionBranch(channels, 1, rng, out_bias=-math.log(DEPTH_PRIOR))
        self.branch_unc = RegressionBranch(channels, 1, rng)
        self.branch_dmap = RegressionBranch(channels, 1, rng)
        self.branch_s3d.out.bias.data = np.asarray(SIZE_PRIOR, dtype=self.branch_s3d.out.bias.dtype)
        self.channels = channels

    def fuse(self, roi: RoiBatch) -> tuple[Tensor, Tensor, Tensor]:
        """Return (FR, offsets, mask)."""
        d = roi.features.shape[-1]
        go = self.scale_encoder(roi.sizes, roi.image_size, d)
        fr = self.refine(roi.features)
        delta = self.offsets(go, fr)
        _, m = self.variance(fr)
        return fr, delta, m

    def forward(self, roi: RoiBatch) -> Head3dOutput:
        n = roi.features.shape[0]
        d = roi.features.shape[-1]
        if n == 0:
            z = T.zeros
            return Head3dOutput(z((0, 3)), z((0, 2)), z((0, 2 * NUM_BINS)), z((0, d, d)), z((0, d, d)), z((0, d, d)))
        fr, delta, m = self.fuse(roi)
        # every branch samples FR at the same modulated locations
        cols = deform_columns(fr, delta, m)

        def pooled(branch):
            return branch.from_columns(cols, fr.shape).mean(axis=(2, 3))

        def dense(branch):
            return branch.from_columns(cols, fr.shape).reshape(n, d, d)

        depth_logit = dense(self.branch_depth)
        # 1/sigmoid(x) - 1 == exp(-x); clamp keeps it finite
        depth = T.exp(T.neg(T.clamp(depth_logit, -10.0, 10.0)))
        return Head3dOutput(
            s3d=pooled(self.branch_s3d),
            o3d=pooled(self.branch_o3d),
            theta=pooled(self.branch_theta),
            depth=depth,
            depth_unc=dense(self.branch_unc),
            depth_map=dense(self.branch_dmap),
        )


def head_forward(roi: RoiBatch, weights: ScaleAwareHead) -> Head3dOutput:
    return weights(roi)
