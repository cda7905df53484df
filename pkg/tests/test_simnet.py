import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftattack import tensor as T
from ftattack.ftkernels import build_bank, ft1_kernel
from ftattack.simnet import SimNet, simulate, simulate_backward

NET = SimNet()
seeds = st.integers(0, 2**32 - 1)


def test_default_output_shape(rng):
    y = simulate(NET, rng.random((2, 3, 32, 32), dtype=np.float32))
    assert y.shape == (2, 36, 28, 28)
    assert y.dtype == np.float32


def test_kernel_major_channel_order(rng):
    img = rng.random((1, 3, 9, 9))
    y = simulate(NET, img)
    for k in (0, 5, 11):
        w = NET.bank[k].weights
        for c in range(3):
            ref = T.conv2d_reference(img[:, c:c + 1], w[None, None], None, T.ConvSpec(1, 1, 5))
            np.testing.assert_allclose(y[:, 3 * k + c], ref[:, 0], atol=1e-12)


def test_constant_image_gives_zero():
    y = simulate(NET, np.full((1, 3, 12, 12), 0.37))
    assert np.abs(y).max() < 1e-12


def test_too_small_rejected():
    with pytest.raises(T.ShapeError):
        simulate(NET, np.zeros((1, 3, 4, 4)))
    with pytest.raises(T.ShapeError):
        simulate(NET, np.zeros((1, 1, 8, 8)))


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(-4, 4))
def test_homogeneous(seed, a):
    img = np.random.default_rng(seed).random((1, 3, 10, 10))
    np.testing.assert_allclose(simulate(NET, a * img), a * simulate(NET, img), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_translation_equivariant(seed):
    img = np.random.default_rng(seed).random((1, 3, 12, 12))
    y = simulate(NET, img)
    shifted = simulate(NET, img[:, :, 1:, :])
    np.testing.assert_allclose(shifted, y[:, :, 1:, :], atol=1e-12)
    shifted = simulate(NET, img[:, :, :, 1:])
    np.testing.assert_allclose(shifted, y[:, :, :, 1:], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seeds, st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_per_channel_constant_invariance(seed, offsets):
    img = np.random.default_rng(seed).random((2, 3, 10, 10)).astype(np.float32)
    moved = img + np.array(offsets, np.float32)[None, :, None, None]
    assert np.abs(simulate(NET, moved) - simulate(NET, img)).max() < 1e-5


def test_bitwise_deterministic(rng):
    img = rng.random((3, 3, 32, 32), dtype=np.float32)
    assert simulate(NET, img).tobytes() == simulate(NET, img.copy()).tobytes()


def test_backward_zero_and_shape(rng):
    g = simulate_backward(NET, np.zeros((1, 36, 4, 4), np.float32), (1, 3, 8, 8))
    assert g.shape == (1, 3, 8, 8) and not g.any()
    with pytest.raises(T.ShapeError):
        simulate_backward(NET, np.zeros((1, 36, 5, 5), np.float32), (1, 3, 8, 8))


def test_single_kernel_reduces_to_conv_backward(rng):
    net = SimNet(build_bank(5, 1))
    img = rng.random((1, 3, 8, 8))
    g = rng.standard_normal((1, 3, 4, 4))
    w = np.repeat(ft1_kernel(5).weights[None, None], 3, axis=0)
    ref = T.conv2d_backward(g, img, w, T.ConvSpec(3, 3, 5, depthwise=True))[0]
    np.testing.assert_allclose(simulate_backward(net, g, img.shape), ref, atol=1e-12)


def test_backward_is_adjoint(rng):
    # <simulate(x), g> == <x, simulate_backward(g)> for a linear map
    x = rng.random((2, 3, 9, 9))
    g = rng.standard_normal((2, 36, 5, 5))
    lhs = float((simulate(NET, x) * g).sum())
    rhs = float((x * simulate_backward(NET, g, x.shape)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_backward_finite_differences(rng):
    x = rng.random((1, 3, 8, 8))
    g = rng.standard_normal((1, 36, 4, 4))
    an = simulate_backward(NET, g, x.shape).reshape(-1)
    flat = x.reshape(-1)
    for i in rng.choice(flat.size, 40, replace=False):
        old = flat[i]
        flat[i] = old + 1e-3
        up = float((simulate(NET, x) * g).sum())
        flat[i] = old - 1e-3
        dn = float((simulate(NET, x) * g).sum())
        flat[i] = old
        num = (up - dn) / 2e-3
        assert abs(an[i] - num) / (abs(an[i]) + abs(num) + 1e-8) < 1e-6


def test_grayscale_and_same_padding(rng):
    img = rng.random((1, 3, 10, 10))
    gray = SimNet(grayscale=True)
    assert simulate(gray, img).shape == (1, 12, 6, 6)
    same = SimNet(padding="same_zero")
    assert simulate(same, img).shape == (1, 36, 10, 10)
    with pytest.raises(ValueError):
        SimNet(padding="reflect")
