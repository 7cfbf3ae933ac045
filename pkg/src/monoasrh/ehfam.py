"""Hybrid feature aggregation: self-attention on the deepest level, then a
convolutional upsample/fuse chain down to stride 4."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import BatchNorm, Conv2d, LayerNorm, Linear, Module, param
from .tensor import Tensor


@dataclass
class EhfamConfig:
    channels: int = 64
    heads: int = 8
    value_dim: int = 128
    ffn_mult: int = 4
    fpn_strides: tuple[int, int, int, int] = (4, 8, 16, 32)

    def __post_init__(self):
        if self.heads < 1 or self.value_dim < 1:
            raise ConfigError("heads and value_dim must be >= 1")


@dataclass
class FeaturePyramid:
    s1: Tensor
    s2: Tensor
    s3: Tensor
    s4: Tensor

    def levels(self) -> list[Tensor]:
        return [self.s1, self.s2, self.s3, self.s4]

    def validate(self) -> None:
        prev = None
        for t in self.levels():
            if prev is not None and (prev.shape[-2] != 2 * t.shape[-2] or prev.shape[-1] != 2 * t.shape[-1]):
                raise DimensionError(f"pyramid extents must halve per level: {prev.shape} -> {t.shape}")
            prev = t


def positional_embedding(height: int, width: int, channels: int, temperature: float = 10000.0) -> Tensor:
    """Fixed 2D sine/cosine embedding, shape (height*width, channels).

    The first half of the channels encodes the row, the second half the
    column; within each half even slots are sines and odd slots cosines.
    """
    if channels % 2:
        raise ConfigError(f"positional embedding needs an even channel count, got {channels}")
    half = channels // 2
    slot = np.arange(half)
    freq = 1.0 / temperature ** (2 * (slot // 2) / half)
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")

    def encode(pos):
        ang = pos.reshape(-1, 1) * freq[None, :]
        return np.where(slot % 2 == 0, np.sin(ang), np.cos(ang))

    return Tensor(np.concatenate([encode(rows), encode(cols)], axis=1))


class SelfAttentionBlock(Module):
    """One post-norm transformer encoder layer over the flattened S4 tokens."""

    def __init__(self, cfg: EhfamConfig, rng: np.random.Generator, use_pe: bool = True):
        c, hd = cfg.channels, cfg.heads * cfg.value_dim
        self.cfg = cfg
        self.use_pe = use_pe
        bq = 1.0 / math.sqrt(c)
        self.w_q = param(rng.uniform(-bq, bq, (c, hd)))
        self.w_k = param(rng.uniform(-bq, bq, (c, hd)))
        self.w_v = param(rng.uniform(-bq, bq, (c, hd)))
        self.w_o = param(rng.uniform(-1 / math.sqrt(hd), 1 / math.sqrt(hd), (hd, c)))
        self.norm1 = LayerNorm(c)
        self.ffn1 = Linear(c, cfg.ffn_mult * c, rng)
        self.ffn2 = Linear(cfg.ffn_mult * c, c, rng)
        self.norm2 = LayerNorm(c)

    def _check(self, c: int) -> None:
        hd = self.cfg.heads * self.cfg.value_dim
        for name, t, shape in (
            ("w_q", self.w_q, (c, hd)),
            ("w_k", self.w_k, (c, hd)),
            ("w_v", self.w_v, (c, hd)),
            ("w_o", self.w_o, (hd, c)),
        ):
            if t.shape != shape:
                raise DimensionError(f"{name} has shape {t.shape}, expected {shape}")

    def attention(self, x_seq: Tensor, pe: Tensor | None) -> tuple[Tensor, Tensor]:
        """Multi-head attention on B×T×C tokens; returns (Z_out, attention B×h×T×T)."""
        b, t, c = x_seq.shape
        self._check(c)
        h, dv = self.cfg.heads, self.cfg.value_dim
        qk_in = x_seq if pe is None else x_seq + T.expand(pe, (b, t, c))
        q = T.linear(qk_in, self.w_q).reshape(b, t, h, dv).transpose(0, 2, 1, 3)
        k = T.linear(qk_in, self.w_k).reshape(b, t, h, dv).transpose(0, 2, 3, 1)
        v = T.linear(x_seq, self.w_v).reshape(b, t, h, dv).transpose(0, 2, 1, 3)
        attn = T.softmax((q @ k) * (1.0 / math.sqrt(dv)), axis=-1)
        z = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, h * dv)
        return T.linear(z, self.w_o), attn

    def encode(self, x_seq: Tensor, pe: Tensor | None) -> Tensor:
        z, _ = self.attention(x_seq, pe)
        y = self.norm1(x_seq + z)
        return self.norm2(y + self.ffn2(T.mish(self.ffn1(y))))

    def forward(self, s4: Tensor) -> Tensor:
        single = s4.ndim == 3
        x = s4.reshape(1, *s4.shape) if single else s4
        b, c, hh, ww = x.shape
        x_seq = x.reshape(b, c, hh * ww).transpose(0, 2, 1)
        pe = positional_embedding(hh, ww, c) if self.use_pe else None
        if pe is not None:
            pe = Tensor(pe.data.astype(x.dtype))
        out = self.encode(x_seq, pe).transpose(0, 2, 1).reshape(b, c, hh, ww)
        return out.reshape(c, hh, ww) if single else out


def multi_head_self_attention(s4: Tensor, cfg: EhfamConfig, weights: SelfAttentionBlock) -> Tensor:
    if weights.cfg.heads != cfg.heads or weights.cfg.value_dim != cfg.value_dim:
        raise DimensionError("attention weights were built for a different configuration")
    return weights(s4)


class UpsampleBlock(Module):
    """1x7 then 7x1 convolution (a factorised 7x7), then 2x bilinear upsampling."""

    def __init__(self, channels: int, rng: np.random.Generator, activation: str | None = "mish"):
        self.conv_row = Conv2d(channels, channels, (1, 7), rng, padding=(0, 3))
        self.conv_col = Conv2d(channels, channels, (7, 1), rng, padding=(3, 0))
        self.activation = activation

    def _act(self, x: Tensor) -> Tensor:
        return T.mish(x) if self.activation == "mish" else x

    def forward(self, x: Tensor) -> Tensor:
        y = self._act(self.conv_col(self._act(self.conv_row(x))))
        return T.bilinear_resize(y, 2 * x.shape[-2], 2 * x.shape[-1])


def upsample_block(x: Tensor, weights: UpsampleBlock) -> Tensor:
    return weights(x)


def fold_norm(kernel: np.ndarray, bn: BatchNorm) -> tuple[np.ndarray, np.ndarray]:
    """Fold frozen normalisation into the preceding convolution."""
    std = np.sqrt(bn.running_var.data.astype(np.float64) + bn.eps)
    gamma = bn.weight.data.astype(np.float64)
    scale = gamma / std
    bias = bn.bias.data.astype(np.float64) - bn.running_mean.data.astype(np.float64) * scale
    return kernel.astype(np.float64) * scale[:, None, None, None], bias


class FusionBlock(Module):
    """Three-branch block (3x3+norm, 1x1+norm, identity norm) with Mish.

    :meth:`reparameterize` collapses the frozen block into one 3x3
    convolution; :meth:`forward_collapsed` runs that single path.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv3 = Conv2d(channels, channels, 3, rng, bias=False)
        self.norm3 = BatchNorm(channels)
        self.conv1 = Conv2d(channels, channels, 1, rng, bias=False)
        self.norm1 = BatchNorm(channels)
        self.norm_id = BatchNorm(channels)
        self.channels = channels

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise DimensionError(f"fusion block expects {self.channels} channels, got {x.shape[1]}")
        y = self.norm3(self.conv3(x)) + self.norm1(self.conv1(x)) + self.norm_id(x)
        return T.mish(y)

    def randomize_norms(self, rng: np.random.Generator) -> None:
        """Give every norm non-trivial statistics and affine terms, as after training."""
        c = self.channels
        for bn in (self.norm3, self.norm1, self.norm_id):
            bn.running_mean.data = rng.normal(scale=0.5, size=c).astype(bn.running_mean.dtype)
            bn.running_var.data = rng.uniform(0.5, 2.0, size=c).astype(bn.running_var.dtype)
            bn.weight.data = rng.uniform(0.5, 1.5, size=c).astype(bn.weight.dtype)
            bn.bias.data = rng.normal(scale=0.5, size=c).astype(bn.bias.dtype)

    def reparameterize(self) -> tuple[np.ndarray, np.ndarray]:
        """Return the (kernel O×C×3×3, bias O) of the equivalent single convolution."""
        if self.training:
            raise ContractError("reparameterize requires frozen statistics; call eval() first")
        c = self.channels
        k3, b3 = fold_norm(self.conv3.weight.data, self.norm3)
        k1 = np.zeros((c, c, 3, 3))
        k1[:, :, 1, 1] = self.conv1.weight.data[:, :, 0, 0]
        k1, b1 = fold_norm(k1, self.norm1)
        kid = np.zeros((c, c, 3, 3))
        kid[np.arange(c), np.arange(c), 1, 1] = 1.0
        kid, bid = fold_norm(kid, self.norm_id)
        return k3 + k1 + kid, b3 + b1 + bid

    @staticmethod
    def forward_collapsed(x: Tensor, kernel: np.ndarray, bias: np.ndarray) -> Tensor:
        k = Tensor(kernel.astype(x.dtype))
        b = Tensor(bias.astype(x.dtype))
        return T.mish(T.conv2d(x, k, b, 1, 1))


def fusion_block_train(x: Tensor, branches: FusionBlock) -> Tensor:
    return branches(x)


def reparameterize(branches: FusionBlock) -> tuple[np.ndarray, np.ndarray]:
    return branches.reparameterize()


class Aggregator(Module):
    """S4 -> attention -> (upsample, add lateral, fuse) x3 -> stride-4 map F."""

    def __init__(self, cfg: EhfamConfig, rng: np.random.Generator, in_channels=None):
        c = cfg.channels
        in_channels = tuple(in_channels or (c, c, c, c))
        self.cfg = cfg
        self.input_proj = None if in_channels[3] == c else Conv2d(in_channels[3], c, 1, rng)
        self.attention = SelfAttentionBlock(cfg, rng)
        self.lateral = [None if cin == c else Conv2d(cin, c, 1, rng) for cin in in_channels[:3]]
        self.upsample = [UpsampleBlock(c, rng) for _ in range(3)]
        self.fuse = [FusionBlock(c, rng) for _ in range(3)]

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        pyramid.validate()
        s4 = pyramid.s4 if self.input_proj is None else self.input_proj(pyramid.s4)
        x = self.attention(s4)
        laterals = [pyramid.s3, pyramid.s2, pyramid.s1]
        for i, lat in enumerate(laterals):
            proj = self.lateral[2 - i]
            if proj is not None:
                lat = proj(lat)
            x = self.fuse[i](self.upsample[i](x) + lat)
        return x


def aggregate(pyramid: FeaturePyramid, cfg: EhfamConfig, weights: Aggregator) -> Tensor:
    if weights.cfg.channels != cfg.channels:
        raise DimensionError("aggregator weights were built for a different channel count")
    return weights(pyramid)
