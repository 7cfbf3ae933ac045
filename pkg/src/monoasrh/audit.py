"""Named finite-difference gradient cases shared by the CLI and the test suite.

Each case builder takes a seeded generator and returns ``(f, x)``: a scalar
function of one tensor and the point to check it at. Inputs are drawn away
from kinks (relu at 0, clamp bounds, integer sample coordinates, peak ties)
so central differences are meaningful at eps 1e-3.
"""
from __future__ import annotations

import fnmatch
from typing import Callable

import numpy as np

from . import tensor as T
from .asrh import AttentiveNorm, ScaleEncoder, VarianceAttention, modulated_deform_conv, roi_align
from .ehfam import EhfamConfig, FusionBlock, SelfAttentionBlock, UpsampleBlock
from .losses import (
    HeatmapTarget,
    draw_gaussian,
    focal_heatmap_loss,
    l1_masked,
    laplacian_depth_loss,
    multibin_encode,
    multibin_loss,
    scg_loss,
)
from .nn import make_rng
from .tensor import GradReport, Tensor

Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]
CASES: dict[str, Case] = {}


def case(name: str):
    def register(fn: Case) -> Case:
        CASES[name] = fn
        return fn

    return register


def _probe(rng: np.random.Generator, shape) -> Tensor:
    """Random nonzero weights; f = sum(w * y) exercises every output."""
    signs = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(signs * rng.uniform(0.5, 1.5, size=shape))


def _weighted(y: Tensor, w: Tensor) -> Tensor:
    return (y * w).sum()


def _away_from_zero(rng, shape, lo=0.2, hi=2.0) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _fractional(rng, shape, lo=0.15, hi=0.85) -> np.ndarray:
    """Offsets whose fractional part stays clear of the bilinear kinks."""
    return rng.integers(-1, 2, size=shape) + rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _unary(name: str, op, sampler=lambda rng, s: rng.normal(size=s), shape=(3, 5)):
    @case(name)
    def build(rng):
        w = _probe(rng, shape)
        return (lambda x: _weighted(op(x), w)), sampler(rng, shape)

    return build


# ---------------------------------------------------------------------------
# elementwise


_unary("tensor.neg", T.neg)
_unary("tensor.exp", T.exp)
_unary("tensor.log", T.log, lambda rng, s: rng.uniform(0.2, 3.0, s))
_unary("tensor.sqrt", T.sqrt, lambda rng, s: rng.uniform(0.2, 3.0, s))
_unary("tensor.power", lambda x: T.power(x, 2.5), lambda rng, s: rng.uniform(0.2, 2.0, s))
_unary("tensor.absolute", T.absolute, _away_from_zero)
_unary("tensor.tanh", T.tanh)
_unary("tensor.sigmoid", T.sigmoid)
_unary("tensor.relu", T.relu, _away_from_zero)
_unary("tensor.leaky_relu", lambda x: T.leaky_relu(x, 0.01), _away_from_zero)
_unary("tensor.softplus", T.softplus)
_unary("tensor.mish", T.mish, lambda rng, s: rng.normal(scale=2.0, size=s))
_unary(
    "tensor.clamp",
    lambda x: T.clamp(x, -1.0, 1.0),
    # half the inputs inside the bounds, half outside, none near +-1
    lambda rng, s: np.where(rng.random(s) < 0.5, _away_from_zero(rng, s, 0.1, 0.8), _away_from_zero(rng, s, 1.2, 2.5)),
)


def _binary(name: str, op, a_sampler, b_sampler, which: int, shape=(4, 3)):
    @case(name)
    def build(rng):
        a, b = a_sampler(rng, shape), b_sampler(rng, shape)
        w = _probe(rng, shape)
        if which == 0:
            return (lambda x: _weighted(op(x, Tensor(b)), w)), a
        return (lambda x: _weighted(op(Tensor(a), x), w)), b

    return build


_normal = lambda rng, s: rng.normal(size=s)  # noqa: E731
_positive = lambda rng, s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
_binary("tensor.add", T.add, _normal, _normal, 0)
_binary("tensor.sub[b]", T.sub, _normal, _normal, 1)
_binary("tensor.mul[a]", T.mul, _normal, _normal, 0)
_binary("tensor.mul[b]", T.mul, _normal, _normal, 1)
_binary("tensor.div[a]", T.div, _normal, _positive, 0)
_binary("tensor.div[b]", T.div, _normal, _positive, 1)


@case("tensor.clamp.edges")
def _clamp_edges(rng):
    # values well outside the bounds have zero gradient on both sides
    x = rng.choice([-3.0, 3.0], size=(2, 4)) + rng.uniform(-0.5, 0.5, size=(2, 4))
    w = _probe(rng, (2, 4))
    return (lambda t: _weighted(T.clamp(t, -1.0, 1.0), w)), x


# ---------------------------------------------------------------------------
# reductions and shape ops


@case("tensor.sum")
def _sum(rng):
    w = _probe(rng, (3, 5))
    return (lambda x: _weighted(x.sum(axis=(0, 3)), w)), rng.normal(size=(3, 3, 5, 2))


@case("tensor.mean")
def _mean(rng):
    w = _probe(rng, (2, 1, 4))
    return (lambda x: _weighted(x.mean(axis=1, keepdims=True), w)), rng.normal(size=(2, 3, 4))


@case("tensor.reshape")
def _reshape(rng):
    w = _probe(rng, (6, 4))
    return (lambda x: _weighted(T.sigmoid(x.reshape(6, 4)), w)), rng.normal(size=(2, 3, 4))


@case("tensor.transpose")
def _transpose(rng):
    w = _probe(rng, (4, 2, 3))
    return (lambda x: _weighted(T.sigmoid(x.transpose(2, 0, 1)), w)), rng.normal(size=(2, 3, 4))


@case("tensor.getitem")
def _getitem(rng):
    idx = np.array([0, 2, 2, 4, 1])  # repeated index accumulates
    w = _probe(rng, (5, 3))
    return (lambda x: _weighted(T.getitem(x, idx), w)), rng.normal(size=(5, 3))


@case("tensor.getitem.slice")
def _getitem_slice(rng):
    w = _probe(rng, (2, 2))
    return (lambda x: _weighted(x[1:3, ::2], w)), rng.normal(size=(4, 4))


@case("tensor.concat")
def _concat(rng):
    other = Tensor(rng.normal(size=(2, 3)))
    w = _probe(rng, (2, 7))
    return (lambda x: _weighted(T.concat([x, other, x], axis=1), w)), rng.normal(size=(2, 2))


@case("tensor.stack")
def _stack(rng):
    other = Tensor(rng.normal(size=(3,)))
    w = _probe(rng, (3, 3))
    return (lambda x: _weighted(T.stack([x, other, T.exp(x)], axis=1), w)), rng.normal(size=(3,))


@case("tensor.expand")
def _expand(rng):
    w = _probe(rng, (2, 3, 4))
    return (lambda x: _weighted(T.expand(x, (2, 3, 4)), w)), rng.normal(size=(3, 1))


@case("tensor.bias_add")
def _bias_add(rng):
    base = Tensor(rng.normal(size=(2, 3, 2, 2)))
    w = _probe(rng, (2, 3, 2, 2))
    return (lambda b: _weighted(T.sigmoid(T.bias_add(base, b, axis=1)), w)), rng.normal(size=(3,))


# ---------------------------------------------------------------------------
# linear algebra and normalisation


@case("tensor.matmul[a]")
def _matmul_a(rng):
    b = Tensor(rng.normal(size=(4, 3)))
    w = _probe(rng, (2, 5, 3))
    return (lambda a: _weighted(a @ T.expand(b, (2, 4, 3)), w)), rng.normal(size=(2, 5, 4))


@case("tensor.matmul[b]")
def _matmul_b(rng):
    a = Tensor(rng.normal(size=(5, 4)))
    w = _probe(rng, (5, 3))
    return (lambda b: _weighted(a @ b, w)), rng.normal(size=(4, 3))


@case("tensor.linear")
def _linear(rng):
    weight = Tensor(rng.normal(size=(4, 3)))
    bias = Tensor(rng.normal(size=(3,)))
    w = _probe(rng, (2, 5, 3))
    return (lambda x: _weighted(T.linear(x, weight, bias), w)), rng.normal(size=(2, 5, 4))


@case("tensor.linear.weight")
def _linear_weight(rng):
    x = Tensor(rng.normal(size=(5, 4)))
    w = _probe(rng, (5, 3))
    return (lambda k: _weighted(T.linear(x, k), w)), rng.normal(size=(4, 3))


@case("tensor.softmax")
def _softmax(rng):
    w = _probe(rng, (3, 6))
    return (lambda x: _weighted(T.softmax(x, axis=1), w)), rng.normal(size=(3, 6))


@case("tensor.log_softmax")
def _log_softmax(rng):
    w = _probe(rng, (4, 5))
    return (lambda x: _weighted(T.log_softmax(x, axis=0), w)), rng.normal(size=(4, 5))


@case("tensor.layer_norm")
def _layer_norm(rng):
    gamma = Tensor(rng.uniform(0.5, 1.5, size=6))
    beta = Tensor(rng.normal(size=6))
    w = _probe(rng, (3, 6))
    return (lambda x: _weighted(T.layer_norm(x, gamma, beta), w)), rng.normal(size=(3, 6))


@case("tensor.layer_norm.weight")
def _layer_norm_weight(rng):
    x = Tensor(rng.normal(size=(3, 6)))
    beta = Tensor(rng.normal(size=6))
    w = _probe(rng, (3, 6))
    return (lambda g: _weighted(T.layer_norm(x, g, beta), w)), rng.uniform(0.5, 1.5, size=6)


@case("tensor.batch_norm")
def _batch_norm(rng):
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3))
    beta = Tensor(rng.normal(size=3))
    w = _probe(rng, (2, 3, 3, 3))
    return (lambda x: _weighted(T.batch_norm(x, gamma, beta), w)), rng.normal(size=(2, 3, 3, 3))


@case("tensor.batch_norm.frozen")
def _batch_norm_frozen(rng):
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3))
    beta = Tensor(rng.normal(size=3))
    mu, var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    w = _probe(rng, (2, 3, 2, 2))
    return (lambda x: _weighted(T.batch_norm(x, gamma, beta, mu, var), w)), rng.normal(size=(2, 3, 2, 2))


# ---------------------------------------------------------------------------
# convolution and sampling


@case("tensor.conv2d")
def _conv2d(rng):
    k = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=4))
    w = _probe(rng, (2, 4, 5, 5))
    return (lambda x: _weighted(T.conv2d(x, k, b, padding=1), w)), rng.normal(size=(2, 3, 5, 5))


@case("tensor.conv2d.strided")
def _conv2d_strided(rng):
    k = Tensor(rng.normal(size=(2, 3, 3, 3)))
    w = _probe(rng, (1, 2, 3, 4))
    return (lambda x: _weighted(T.conv2d(x, k, stride=2, padding=1), w)), rng.normal(size=(1, 3, 6, 7))


@case("tensor.conv2d.rect")
def _conv2d_rect(rng):
    k = Tensor(rng.normal(size=(2, 2, 1, 7)))
    w = _probe(rng, (1, 2, 3, 8))
    return (lambda x: _weighted(T.conv2d(x, k, padding=(0, 3)), w)), rng.normal(size=(1, 2, 3, 8))


@case("tensor.conv2d.narrow")
def _conv2d_narrow(rng):
    k = Tensor(rng.normal(size=(2, 4, 3, 3)))
    b = Tensor(rng.normal(size=2))
    w = _probe(rng, (2, 2, 5, 4))
    return (lambda x: _weighted(T.conv2d(x, k, b, padding=1), w)), rng.normal(size=(2, 4, 5, 4))


@case("tensor.conv2d.weight")
def _conv2d_weight(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = _probe(rng, (2, 2, 5, 5))
    return (lambda k: _weighted(T.conv2d(x, k, padding=1), w)), rng.normal(size=(2, 3, 3, 3))


@case("tensor.bilinear_sample[x]")
def _sample_x(rng):
    pts = Tensor(rng.uniform(-1.5, 5.5, size=(12, 2)))
    w = _probe(rng, (3, 12))
    return (lambda x: _weighted(T.bilinear_sample(x, pts), w)), rng.normal(size=(3, 4, 5))


@case("tensor.bilinear_sample[points]")
def _sample_points(rng):
    img = Tensor(rng.normal(size=(3, 5, 6)))
    pts = np.stack([rng.integers(-1, 5, 10), rng.integers(-1, 6, 10)], axis=1) + rng.uniform(0.15, 0.85, (10, 2))
    w = _probe(rng, (3, 10))
    return (lambda p: _weighted(T.bilinear_sample(img, p), w)), pts


@case("tensor.bilinear_sample.batched")
def _sample_batched(rng):
    img = Tensor(rng.normal(size=(2, 2, 4, 4)))
    pts = np.stack([rng.integers(0, 3, (3, 5)), rng.integers(0, 3, (3, 5))], axis=-1) + rng.uniform(0.15, 0.85, (3, 5, 2))
    index = np.array([1, 0, 1])
    w = _probe(rng, (3, 2, 5))
    return (lambda p: _weighted(T.bilinear_sample(img, p, index), w)), pts


@case("tensor.bilinear_resize")
def _resize(rng):
    w = _probe(rng, (2, 6, 10))
    return (lambda x: _weighted(T.bilinear_resize(x, 6, 10), w)), rng.normal(size=(2, 3, 5))


# ---------------------------------------------------------------------------
# aggregator blocks


def _small_cfg() -> EhfamConfig:
    return EhfamConfig(channels=8, heads=2, value_dim=4)


@case("ehfam.self_attention")
def _attention(rng):
    block = SelfAttentionBlock(_small_cfg(), rng)
    w = _probe(rng, (1, 8, 2, 3))
    return (lambda x: _weighted(block(x), w)), rng.normal(size=(1, 8, 2, 3))


@case("ehfam.upsample")
def _upsample(rng):
    block = UpsampleBlock(3, rng)
    w = _probe(rng, (1, 3, 6, 8))
    return (lambda x: _weighted(block(x), w)), rng.normal(size=(1, 3, 3, 4))


@case("ehfam.fusion_block")
def _fusion(rng):
    block = FusionBlock(3, rng)
    block.train()
    w = _probe(rng, (2, 3, 4, 4))
    return (lambda x: _weighted(block(x), w)), rng.normal(size=(2, 3, 4, 4))


# ---------------------------------------------------------------------------
# scale-aware head


@case("asrh.roi_align")
def _roi_align(rng):
    boxes = np.array([[0.3, 0.6, 4.7, 3.9], [1.2, 0.1, 5.5, 4.4]])
    w = _probe(rng, (2, 2, 3, 3))
    return (lambda x: _weighted(roi_align(x, boxes, np.array([0, 1]), output_size=3)[0], w)), rng.normal(size=(2, 2, 5, 6))


@case("asrh.scale_encoder")
def _scale_encoder(rng):
    enc = ScaleEncoder(rng, hidden=8, out=4)
    w = _probe(rng, (3, 4, 2, 2))
    return (lambda s: _weighted(enc(s, (384, 128), grid=2), w)), rng.uniform(10.0, 120.0, size=(3, 2))


def _deform_inputs(rng):
    fr = rng.normal(size=(1, 4, 7, 7))
    offsets = _fractional(rng, (1, 18, 7, 7))
    mask = rng.uniform(0.1, 0.9, size=(1, 9, 7, 7))
    weight = Tensor(rng.normal(size=(3, 4, 3, 3)))
    bias = Tensor(rng.normal(size=3))
    return fr, offsets, mask, weight, bias


@case("asrh.deform_conv[fr]")
def _deform_fr(rng):
    fr, off, m, k, b = _deform_inputs(rng)
    w = _probe(rng, (1, 3, 7, 7))
    return (lambda x: _weighted(modulated_deform_conv(x, Tensor(off), Tensor(m), k, b), w)), fr


@case("asrh.deform_conv[offsets]")
def _deform_offsets(rng):
    fr, off, m, k, b = _deform_inputs(rng)
    w = _probe(rng, (1, 3, 7, 7))
    return (lambda x: _weighted(modulated_deform_conv(Tensor(fr), x, Tensor(m), k, b), w)), off


@case("asrh.deform_conv[mask]")
def _deform_mask(rng):
    fr, off, m, k, b = _deform_inputs(rng)
    w = _probe(rng, (1, 3, 7, 7))
    return (lambda x: _weighted(modulated_deform_conv(Tensor(fr), Tensor(off), x, k, b), w)), m


@case("asrh.variance_attention")
def _variance(rng):
    att = VarianceAttention(3, rng)
    wy, wm = _probe(rng, (2, 3, 3, 3)), _probe(rng, (2, 9, 3, 3))

    def f(x):
        y, m = att(x)
        return _weighted(y, wy) + _weighted(m, wm)

    return f, rng.normal(size=(2, 3, 3, 3))


@case("asrh.attentive_norm")
def _attentive(rng):
    norm = AttentiveNorm(3, rng)
    norm.train()
    w = _probe(rng, (2, 3, 3, 3))
    return (lambda x: _weighted(norm(x), w)), rng.normal(size=(2, 3, 3, 3))


# ---------------------------------------------------------------------------
# losses


@case("loss.focal")
def _focal(rng):
    gauss = np.zeros((1, 3, 8, 8))
    for _ in range(3):
        draw_gaussian(gauss[0, rng.integers(3)], (int(rng.integers(8)), int(rng.integers(8))), 2)
    target = HeatmapTarget(gauss)
    return (lambda p: focal_heatmap_loss(p, target)), rng.uniform(0.05, 0.95, size=(1, 3, 8, 8))


@case("loss.scg")
def _scg(rng):
    # distinct levels 5e-3 apart keep peak ranks and the 0.9 cut fixed under eps
    n = 2 * 2 * 6 * 6
    levels = 0.01 + (np.arange(n) + 0.5) * (0.985 / n)
    levels = np.where(np.abs(levels - 0.9) < 2e-3, levels + 2.5e-3, levels)
    heat = rng.permutation(levels).reshape(2, 2, 6, 6)
    return (lambda p: scg_loss(p, 6, 0.9)), heat


@case("loss.l1")
def _l1(rng):
    target = rng.normal(size=(4, 3))
    mask = rng.random((4, 1)) > 0.3
    mask[0] = True
    return (lambda p: l1_masked(p, target, mask)), target + _away_from_zero(rng, (4, 3), 0.05, 1.0)


@case("loss.multibin")
def _multibin(rng):
    n = 4
    alpha = rng.uniform(-np.pi, np.pi, size=n)
    bins, res = multibin_encode(alpha)
    theta = rng.normal(size=(n, 24))
    theta[np.arange(n), 12 + bins] = res + _away_from_zero(rng, n, 0.05, 0.5)
    return (lambda t: multibin_loss(t, alpha)), theta


@case("loss.laplacian_depth[d]")
def _laplace_d(rng):
    gt = rng.uniform(5.0, 40.0, size=5)
    log_sigma = Tensor(rng.normal(scale=0.5, size=5))
    return (lambda d: laplacian_depth_loss(d, log_sigma, gt)), gt + _away_from_zero(rng, 5, 0.05, 3.0)


@case("loss.laplacian_depth[sigma]")
def _laplace_sigma(rng):
    gt = rng.uniform(5.0, 40.0, size=5)
    d = Tensor(gt + _away_from_zero(rng, 5, 0.05, 3.0))
    return (lambda s: laplacian_depth_loss(d, s, gt)), rng.normal(scale=0.5, size=5)


# ---------------------------------------------------------------------------
# negative control


def _broken_square(x: Tensor) -> Tensor:
    """x**2 whose backward is off by a factor of 1.5: must be caught."""
    return T._result(x.data**2, (x,), lambda g: (g * 3.0 * x.data,), "broken_square")


def broken_case(rng):
    return (lambda x: _broken_square(x).sum()), rng.normal(size=(3, 3))


# ---------------------------------------------------------------------------
# runner


def select(pattern: str = "*") -> list[str]:
    return [name for name in CASES if fnmatch.fnmatchcase(name, pattern)]


def check_case(name: str, builder: Case, seeds: int = 10, eps: float = 1e-3, tol: float = 1e-3) -> GradReport:
    """Worst report over ``seeds`` seeded instances of one case."""
    worst = None
    for seed in range(seeds):
        with T.precision(np.float64):
            f, x = builder(make_rng(seed))
        report = T.grad_check(f, x, eps=eps, tol=tol, op_name=name)
        if worst is None or report.max_rel_error > worst.max_rel_error:
            worst = report
    return worst


def run_audit(pattern: str = "*", seeds: int = 10, include_broken: bool = False) -> list[GradReport]:
    names = select(pattern)
    reports = [check_case(n, CASES[n], seeds) for n in names]
    if include_broken:
        reports.append(check_case("fixture.broken_square", broken_case, seeds))
    return reports
