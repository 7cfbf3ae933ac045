import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monoasrh import tensor as T
from monoasrh.asrh import (
    AttentiveNorm,
    Head3dOutput,
    OffsetGenerator,
    RoiBatch,
    ScaleAwareHead,
    ScaleEncoder,
    SemanticRefiner,
    VarianceAttention,
    attentive_norm,
    head_forward,
    modulated_deform_conv,
    roi_align,
)
from monoasrh.errors import ContractError, DimensionError
from monoasrh.nn import make_rng
from monoasrh.tensor import Tensor

from conftest import naive_conv2d


def test_roi_align_constant_map():
    fmap = Tensor(np.full((3, 10, 12), 2.5, np.float32))
    feats, degen = roi_align(fmap, [[1.3, 2.2, 7.9, 8.1], [0, 0, 12, 10]])
    assert feats.shape == (2, 3, 7, 7) and not degen.any()
    np.testing.assert_allclose(feats.data, 2.5, rtol=1e-6)


def test_roi_align_full_map_identity(rng):
    x = rng.normal(size=(2, 7, 7)).astype(np.float32)
    feats, _ = roi_align(Tensor(x), [[0, 0, 7, 7]])
    # each bin averages four samples at +-0.25 around its centre, clamped to the map
    def sample(img, y, xq):
        pt = np.clip([[y, xq]], 0, 6).astype(np.float32)
        return T.bilinear_sample(Tensor(img), Tensor(pt)).data[:, 0]

    ref = np.zeros_like(x)
    for i in range(7):
        for j in range(7):
            ref[:, i, j] = np.mean([sample(x, i + dy, j + dx) for dy in (-0.25, 0.25) for dx in (-0.25, 0.25)], axis=0)
    np.testing.assert_allclose(feats.data[0], ref, atol=1e-6)


def test_roi_align_empty_and_degenerate():
    fmap = Tensor(np.ones((2, 8, 8), np.float32))
    feats, degen = roi_align(fmap, np.zeros((0, 4)))
    assert feats.shape == (0, 2, 7, 7) and degen.shape == (0,)
    feats, degen = roi_align(fmap, [[3, 3, 3, 6], [20, 20, 30, 30], [1, 1, 5, 5]])
    assert degen.tolist() == [True, True, False]
    assert not feats.data[:2].any()


def test_scale_encoder(rng):
    enc = ScaleEncoder(rng)
    sizes = Tensor(np.array([[40.0, 20.0], [40.0, 20.0], [10.0, 90.0]]), requires_grad=True)
    go = enc(sizes, (384, 128))
    assert go.shape == (3, 32, 7, 7)
    np.testing.assert_array_equal(go.data[0], go.data[1])
    assert (go.data == go.data[:, :, :1, :1]).all()
    go.sum().backward()
    assert np.abs(sizes.grad).max() > 0
    with pytest.raises(ContractError):
        enc(Tensor(np.array([[0.0, 3.0]])), (384, 128))


def test_semantic_refiner(rng):
    ref = SemanticRefiner(4, rng)
    x = rng.normal(size=(2, 4, 7, 7)).astype(np.float32)
    out = ref(Tensor(x))
    assert out.shape == x.shape
    hidden = np.maximum(naive_conv2d(x, ref.conv_a.weight.data, ref.conv_a.bias.data, pad=1), 0)
    np.testing.assert_allclose(out.data, naive_conv2d(hidden, ref.conv_b.weight.data, ref.conv_b.bias.data, pad=1), atol=1e-5)
    ref.conv_a.bias.data[:] = 0
    ref.conv_b.bias.data[:] = 0
    assert not ref(Tensor(np.zeros((1, 4, 7, 7), np.float32))).data.any()


def test_offsets_start_at_zero_then_depend_on_scale(rng):
    gen = OffsetGenerator(4, rng)
    enc = ScaleEncoder(rng)
    fr = Tensor(rng.normal(size=(1, 4, 7, 7)).astype(np.float32))
    go = enc(Tensor(np.array([[30.0, 15.0]], np.float32)), (384, 128))
    delta = gen(go, fr)
    assert delta.shape == (1, 18, 7, 7) and not delta.data.any()
    # once the last conv is non-zero, the box size moves the offsets
    gen.conv_b.weight.data = rng.normal(size=gen.conv_b.weight.shape).astype(np.float32)
    with T.precision(np.float64):
        def offsets_for(w):
            g = enc(Tensor(np.array([[w, 15.0]])), (384, 128))
            return gen(g, Tensor(fr.data.astype(np.float64))).data

        probe = np.abs(offsets_for(30.0 + 1e-3) - offsets_for(30.0 - 1e-3)).max() / 2e-3
    assert probe > 1e-8


def test_variance_attention_examples(rng):
    va = VarianceAttention(3, rng)
    const = Tensor(np.full((2, 3, 7, 7), 1.7, np.float32))
    np.testing.assert_allclose(va.argument(const).data, 0.5)
    y, m = va(Tensor(rng.normal(size=(2, 3, 7, 7)).astype(np.float32)))
    assert m.shape == (2, 9, 7, 7) and (m.data > 0).all() and (m.data < 1).all()
    hot = np.zeros((1, 3, 7, 7), np.float32)
    hot[0, :, 2, 5] = 1.0
    arg = va.argument(Tensor(hot)).data[0, 0]
    assert np.unravel_index(arg.argmax(), arg.shape) == (2, 5)
    assert (arg < arg[2, 5]).sum() == 48
    with pytest.raises(ContractError):
        va.argument(Tensor(np.ones((1, 3, 1, 1), np.float32)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_variance_argument_shift_invariant(seed, shift):
    rng = make_rng(seed)
    va = VarianceAttention(2, rng)
    with T.precision(np.float64):
        x = rng.normal(size=(2, 2, 7, 7))
        a = va.argument(Tensor(x)).data
        b = va.argument(Tensor(x + shift)).data
    assert np.abs(a - b).max() <= 1e-6


def _deform_inputs(rng, n=2, c=3, h=6, w=5, o=4):
    fr = rng.normal(size=(n, c, h, w)).astype(np.float32)
    weight = rng.normal(size=(o, c, 3, 3)).astype(np.float32)
    bias = rng.normal(size=o).astype(np.float32)
    return fr, weight, bias


@pytest.mark.parametrize("seed", range(5))
def test_deform_conv_degenerates_to_dense(seed):
    rng = make_rng(seed)
    fr, weight, bias = _deform_inputs(rng)
    n, _, h, w = fr.shape
    out = modulated_deform_conv(
        Tensor(fr), T.zeros((n, 18, h, w)), Tensor(np.ones((n, 9, h, w), np.float32)), Tensor(weight), Tensor(bias)
    )
    dense = T.conv2d(Tensor(fr), Tensor(weight), Tensor(bias), 1, 1).data
    assert np.abs(out.data - dense).max() <= 1e-6 * max(1.0, np.abs(dense).max())


def test_deform_conv_integer_shift(rng):
    fr, weight, _ = _deform_inputs(rng)
    n, _, h, w = fr.shape
    off = np.zeros((n, 18, h, w), np.float32)
    off[:, 1::2] = 1.0  # dx = +1 on every tap
    out = modulated_deform_conv(Tensor(fr), Tensor(off), Tensor(np.ones((n, 9, h, w), np.float32)), Tensor(weight))
    # out(x) reads fr at x + t + 1 for t in {-1, 0, 1}: a dense conv over fr
    # padded by 0 columns on the left and 2 on the right
    shifted = np.pad(fr, ((0, 0), (0, 0), (1, 1), (0, 2)))
    np.testing.assert_allclose(out.data, naive_conv2d(shifted, weight), atol=1e-5)


def test_deform_conv_zero_mask_gives_bias(rng):
    fr, weight, bias = _deform_inputs(rng)
    n, _, h, w = fr.shape
    out = modulated_deform_conv(
        Tensor(fr), Tensor(rng.normal(size=(n, 18, h, w)).astype(np.float32)), T.zeros((n, 9, h, w)),
        Tensor(weight), Tensor(bias),
    )
    np.testing.assert_allclose(out.data, np.broadcast_to(bias[None, :, None, None], out.shape))


def test_deform_conv_shape_errors(rng):
    fr, weight, _ = _deform_inputs(rng)
    n, c, h, w = fr.shape
    ones = Tensor(np.ones((n, 9, h, w), np.float32))
    with pytest.raises(DimensionError):
        modulated_deform_conv(Tensor(fr), T.zeros((n, 18, h, w)), ones, Tensor(weight[:, :2]))
    with pytest.raises(DimensionError):
        modulated_deform_conv(Tensor(fr), T.zeros((n, 16, h, w)), ones, Tensor(weight))


def test_deform_conv_gradients_pass_audit():
    from monoasrh.audit import run_audit

    reports = list(run_audit("asrh.deform_conv*", seeds=3))
    assert len(reports) == 3
    assert all(r.passed for r in reports), [r.line() for r in reports]


def test_attentive_norm_examples(rng):
    x = rng.normal(size=(4, 3, 5, 5)).astype(np.float32)
    an1 = AttentiveNorm(3, rng, k=1)
    out = attentive_norm(Tensor(x), an1).data
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    xhat = (x - mu) / np.sqrt(x.var(axis=(0, 2, 3), keepdims=True) + 1e-5)
    ref = xhat * an1.gamma.data[0][None, :, None, None] + an1.beta.data[0][None, :, None, None]
    np.testing.assert_allclose(out, ref, atol=1e-5)

    an = AttentiveNorm(3, rng)
    lam = an.mixture_weights(Tensor(x)).data
    np.testing.assert_allclose(lam.sum(axis=1), 1.0, atol=1e-6)
    twin = np.concatenate([x[:1], x[:1]])
    lam2 = an.mixture_weights(Tensor(twin)).data
    np.testing.assert_array_equal(lam2[0], lam2[1])
    assert an(T.zeros((0, 3, 5, 5))).shape == (0, 3, 5, 5)


def _roi(rng, n, c=4):
    return RoiBatch(
        features=Tensor(rng.normal(size=(n, c, 7, 7)).astype(np.float32)),
        sizes=Tensor(rng.uniform(5, 80, size=(n, 2)).astype(np.float32)),
        boxes=np.tile([[1.0, 1.0, 9.0, 6.0]], (n, 1)),
    )


def test_head_forward_shapes_and_depth(rng):
    head = ScaleAwareHead(4, rng)
    out = head_forward(_roi(rng, 3), head)
    assert isinstance(out, Head3dOutput)
    assert out.s3d.shape == (3, 3) and out.o3d.shape == (3, 2) and out.theta.shape == (3, 24)
    for t in (out.depth, out.depth_unc, out.depth_map):
        assert t.shape == (3, 7, 7)
    assert (out.depth.data > 0).all()
    d, log_sigma = out.aggregated_depth()
    flat = out.depth.data.reshape(3, -1)
    assert ((d.data >= flat.min(1) - 1e-5) & (d.data <= flat.max(1) + 1e-5)).all()
    empty = head(_roi(rng, 0))
    assert empty.theta.shape == (0, 24)


def test_depth_positive_for_extreme_logits(rng):
    head = ScaleAwareHead(4, rng)
    head.branch_depth.out.bias.data[:] = 80.0
    assert (head(_roi(rng, 2)).depth.data > 0).all()
    head.branch_depth.out.bias.data[:] = -80.0
    assert np.isfinite(head(_roi(rng, 2)).depth.data).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_aggregated_depth_is_convex_combination(seed):
    rng = make_rng(seed)
    n = 3
    out = Head3dOutput(
        s3d=T.zeros((n, 3)), o3d=T.zeros((n, 2)), theta=T.zeros((n, 24)),
        depth=Tensor(rng.uniform(0.5, 80, size=(n, 7, 7))),
        depth_unc=Tensor(rng.normal(size=(n, 7, 7))),
        depth_map=Tensor(rng.normal(scale=5, size=(n, 7, 7))),
    )
    d, _ = out.aggregated_depth()
    flat = out.depth.data.reshape(n, -1)
    assert ((d.data >= flat.min(1) - 1e-9) & (d.data <= flat.max(1) + 1e-9)).all()


def test_roi_batch_validation(rng):
    with pytest.raises(ContractError):
        RoiBatch(T.zeros((1, 2, 7, 7)), Tensor([[0.0, 3.0]]), np.zeros((1, 4)))
    with pytest.raises(DimensionError):
        RoiBatch(T.zeros((2, 2, 7, 7)), Tensor([[1.0, 3.0]]), np.zeros((2, 4)))
