import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from monoasrh import tensor as T
from monoasrh.errors import ContractError, DimensionError, NonFiniteError
from monoasrh.tensor import Tensor

from conftest import naive_conv2d

finite = st.floats(-20, 20, allow_nan=False, width=32)


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal((eye @ eye).data, np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ Tensor([[0.0], [1.0]])).data, [[2.0], [4.0]])
    np.testing.assert_array_equal((a @ Tensor(np.zeros((2, 3)))).data, np.zeros((2, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_no_implicit_broadcasting():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    # scalars are allowed
    np.testing.assert_array_equal((Tensor(np.ones((2, 3))) * 2.0).data, 2 * np.ones((2, 3)))


def test_conv2d_examples():
    x = Tensor(np.arange(18, dtype=np.float64).reshape(1, 2, 3, 3))
    ones = Tensor(np.ones((1, 2, 1, 1)))
    np.testing.assert_allclose(T.conv2d(x, ones).data[0, 0], x.data[0].sum(axis=0))
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0
    z = T.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))), padding=1)
    assert not z.data.any()


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1)])
def test_conv2d_matches_naive(rng, stride, pad, k):
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 3, k, k)).astype(np.float32)
    b = rng.normal(size=2).astype(np.float32)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, pad), atol=1e-5)


def test_bilinear_sample_examples():
    img = Tensor(np.array([[[0.0, 0.0], [2.0, 2.0]]]))
    assert T.bilinear_sample(img, Tensor([[0.5, 0.5]])).item() == pytest.approx(1.0)
    assert T.bilinear_sample(img, Tensor([[1.0, 0.0]])).item() == 2.0
    assert T.bilinear_sample(img, Tensor([[50.0, -40.0]])).item() == 0.0


def test_bilinear_sample_zero_padding_band():
    # between -1 and 0 the sample fades linearly towards zero
    img = Tensor(np.ones((1, 3, 3)))
    assert T.bilinear_sample(img, Tensor([[-0.25, 1.0]])).item() == pytest.approx(0.75)
    assert T.bilinear_sample(img, Tensor([[-1.0, 1.0]])).item() == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_bilinear_sample_integer_points_exact(c, h, w, seed):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(c, h, w)).astype(np.float32)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float32)
    out = T.bilinear_sample(Tensor(img), Tensor(pts)).data
    np.testing.assert_array_equal(out, img.reshape(c, -1))


def test_activation_examples():
    np.testing.assert_allclose(T.softmax(Tensor(np.full(4, 3.0))).data, [0.25] * 4)
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.mish(Tensor(0.0)).item() == 0.0
    assert T.leaky_relu(Tensor([-2.0])).item() == pytest.approx(-0.02)


def test_mish_matches_definition():
    x = np.linspace(-30, 30, 241)
    ref = x * np.tanh(np.log1p(np.exp(x)))
    np.testing.assert_allclose(T.mish(Tensor(x)).data, ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite), st.sampled_from([0, 1]))
def test_softmax_is_a_distribution(x, axis):
    p = T.softmax(Tensor(x), axis=axis).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-6)


def test_bilinear_resize_examples():
    const = Tensor(np.full((2, 3, 4), 1.5))
    np.testing.assert_allclose(T.bilinear_resize(const, 6, 8).data, 1.5)
    one = T.bilinear_resize(Tensor(np.array([[[7.0]]])), 2, 2)
    np.testing.assert_array_equal(one.data, np.full((1, 2, 2), 7.0))
    ramp = T.bilinear_resize(Tensor(np.array([[[0.0, 1.0]]])), 1, 4).data.ravel()
    assert (np.diff(ramp) >= 0).all()
    np.testing.assert_allclose(ramp, [0.0, 0.25, 0.75, 1.0])


def test_backward_examples():
    x = Tensor(np.arange(5.0), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(5))
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    y = Tensor([3.0], requires_grad=True)
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.sum().backward()
    assert y.grad is None


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_gradient_accumulates_over_shared_nodes():
    x = Tensor([1.5], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(2 * 1.5 + 3 * 1.5**2)


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) / Tensor([0.0])


def test_grad_check_examples(rng):
    x = rng.normal(size=(4, 5))
    assert T.grad_check(lambda t: t.sum(), x).max_rel_error < 1e-8
    rep = T.grad_check(lambda t: Tensor(3.0) + 0.0 * t.sum(), x)
    assert rep.passed and rep.max_rel_error == 0.0
    line = rep.line()
    assert line.startswith("PASS") and "max_rel_error" in line


def test_grad_check_focal_example(rng):
    from monoasrh.losses import HeatmapTarget, draw_gaussian, focal_heatmap_loss

    gauss = np.zeros((1, 3, 8, 8))
    draw_gaussian(gauss[0, 1], (3, 4), 2)
    target = HeatmapTarget(gauss)
    x = rng.uniform(0.05, 0.95, size=(1, 3, 8, 8))
    assert T.grad_check(lambda p: focal_heatmap_loss(p, target), x, eps=1e-3, tol=1e-3).passed


def test_grad_check_detects_wrong_backward(rng):
    from monoasrh.audit import broken_case

    f, x = broken_case(rng)
    rep = T.grad_check(f, x)
    assert not rep.passed and rep.max_rel_error > 0.1


def test_precision_context_restores_default():
    with T.precision(np.float64):
        assert Tensor([1]).dtype == np.float64
    assert Tensor([1]).dtype == np.float32


def test_snapshot_round_trip(tmp_path, rng):
    state = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32(2.5) * np.ones(())}
    T.save_snapshot(tmp_path / "w.bin", state)
    back = T.load_snapshot(tmp_path / "w.bin")
    assert list(back) == list(state)
    for k in state:
        np.testing.assert_array_equal(back[k], state[k])
    raw = (tmp_path / "w.bin").read_bytes()
    assert int.from_bytes(raw[:8], "little") > 0


def test_getitem_and_concat_grads():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    T.getitem(x, np.array([0, 0, 2])).sum().backward()
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])
    a = Tensor(np.ones((2, 1)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    (T.concat([a, b], axis=1) * Tensor(np.array([[1.0, 2, 3], [4, 5, 6]]))).sum().backward()
    np.testing.assert_array_equal(a.grad, [[1], [4]])
    np.testing.assert_array_equal(b.grad, [[2, 3], [5, 6]])
