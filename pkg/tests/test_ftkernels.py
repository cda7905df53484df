"""Kernel synthesis.  Reference values come from exact rational arithmetic."""

import math
import pickle
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftattack.ftkernels import (KernelBank, KernelKind, KernelSizeError, build_bank,
                                ft0_kernel, ft1_kernel, rotate_kernel)
from ftattack.simnet import SimNet, simulate

odd_sizes = st.sampled_from([3, 5, 7, 9, 11])


def brute_ft1(d):
    """Closed form evaluated entry by entry with Fractions (1-indexed, x = row)."""
    rows = []
    for x in range(1, d + 1):
        row = []
        for y in range(1, d + 1):
            c = Fraction(d + 1, 2)
            tx = 1 - Fraction(abs(2 * x - d - 1), d + 1)
            ty = 1 - Fraction(abs(2 * y - d - 1), d + 1)
            row.append((x - c) * tx * ty)
        rows.append(row)
    return rows


def test_ft1_d3_matches_hand_values():
    expected = [[-0.25, -0.5, -0.25], [0, 0, 0], [0.25, 0.5, 0.25]]
    k = ft1_kernel(3)
    assert k.kind is KernelKind.FT1 and k.angle_deg == 0.0
    np.testing.assert_allclose(k.weights, expected, rtol=0, atol=1e-12)
    assert np.all(k.weights[1] == 0.0)


def test_ft1_d5_first_row():
    np.testing.assert_allclose(ft1_kernel(5).weights[0], [-2 / 9, -4 / 9, -2 / 3, -4 / 9, -2 / 9],
                               rtol=0, atol=1e-12)


@pytest.mark.parametrize("d", [3, 5, 7, 9, 11])
def test_ft1_matches_rational_oracle(d):
    oracle = np.array([[float(v) for v in row] for row in brute_ft1(d)])
    np.testing.assert_allclose(ft1_kernel(d).weights, oracle, rtol=0, atol=1e-12)


@pytest.mark.parametrize("bad", [2, 4, 1, 0, -3, 3.5, True])
def test_bad_sizes_rejected(bad):
    with pytest.raises(KernelSizeError):
        ft1_kernel(bad)
    with pytest.raises(KernelSizeError):
        ft0_kernel(bad)


def test_ft0_values():
    k = ft0_kernel(3)
    assert k.kind is KernelKind.FT0
    assert math.isclose(k.weights.sum(), 1.0, abs_tol=1e-15)
    unnorm = k.weights / k.weights[1, 1]
    assert unnorm[1, 1] == 1.0
    assert math.isclose(unnorm[0, 0], 0.25, abs_tol=1e-15)


def test_rotation_examples():
    kx = ft1_kernel(3)
    ky = kx.T
    assert np.array_equal(rotate_kernel(kx, ky, 0).weights, kx.weights)
    assert np.array_equal(rotate_kernel(kx, ky, 90).weights, ky.weights)
    r = rotate_kernel(kx, ky, 30)
    assert r.kind is KernelKind.ROTATED
    c, s = math.cos(math.radians(30)), math.sin(math.radians(30))
    assert math.isclose(r.weights[0, 0], -0.25 * (c + s), abs_tol=1e-12)
    assert math.isclose(r.weights[0, 0], -0.341506, abs_tol=1e-6)
    assert rotate_kernel(kx, ky, 390).angle_deg == 30.0
    assert rotate_kernel(kx, ky, -90).angle_deg == 270.0


def test_rotation_size_mismatch():
    with pytest.raises(KernelSizeError):
        rotate_kernel(ft1_kernel(3), ft1_kernel(5).T, 10)


def test_default_bank():
    bank = build_bank(5, 12)
    assert len(bank) == 12 and bank.size == 5
    assert bank.angles == [30.0 * k for k in range(12)]
    assert bank.angle_step_deg == 30.0
    assert np.array_equal(bank[6].weights, -bank[0].weights)


def test_single_angle_bank():
    bank = build_bank(3, 1)
    assert len(bank) == 1
    assert np.array_equal(bank[0].weights, ft1_kernel(3).weights)


def test_bank_rejects_bad_args():
    with pytest.raises(KernelSizeError):
        build_bank(4, 12)
    with pytest.raises(ValueError):
        build_bank(5, 0)


def test_bank_is_immutable():
    bank = build_bank()
    with pytest.raises(ValueError):
        bank.stack()[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        bank[0].weights[0, 0] = 1.0
    with pytest.raises(AttributeError):
        bank.angle_step_deg = 10.0


def test_bank_hash_unchanged_by_use(rng):
    bank = build_bank()
    before = (bank.digest(), pickle.dumps(bank.to_tensors()))
    net = SimNet(bank)
    for _ in range(3):
        simulate(net, rng.random((2, 3, 12, 12), dtype=np.float32))
    assert (bank.digest(), pickle.dumps(bank.to_tensors())) == before


def test_bank_tensor_round_trip():
    bank = build_bank()
    back = KernelBank.from_tensors(bank.to_tensors())
    assert back.angles == bank.angles
    np.testing.assert_allclose(back.stack(), bank.stack(), rtol=1e-6, atol=1e-7)


def test_normalized_flag():
    k = ft1_kernel(5, normalize=True)
    assert math.isclose(np.abs(k.weights).sum(), 1.0, rel_tol=1e-12)


# ----------------------------------------------------------------- properties


@given(odd_sizes, st.integers(0, 11))
def test_zero_sum_every_angle(d, k):
    w = build_bank(d, 12)[k].weights
    assert abs(w.sum()) < 1e-12
    assert abs(w.astype(np.float32).sum(dtype=np.float32)) < 1e-9 * max(1, d * d) + 1e-6


@given(odd_sizes)
def test_separable(d):
    x = np.arange(1, d + 1, dtype=float)
    v = 1 - np.abs(2 * x - d - 1) / (d + 1)
    u = (x - (d + 1) / 2) * v
    np.testing.assert_allclose(ft1_kernel(d).weights, np.outer(u, v), rtol=0, atol=1e-12)


@given(odd_sizes)
def test_row_antisymmetry_column_symmetry(d):
    w = ft1_kernel(d).weights
    assert np.array_equal(w, -w[::-1, :])
    assert np.array_equal(w, w[:, ::-1])


@given(odd_sizes, st.floats(-720, 720, allow_nan=False))
def test_half_turn_negates(d, alpha):
    kx = ft1_kernel(d)
    a = rotate_kernel(kx, kx.T, alpha).weights
    b = rotate_kernel(kx, kx.T, alpha + 180.0).weights
    assert np.max(np.abs(a + b)) < 1e-12


@settings(max_examples=30)
@given(odd_sizes, st.floats(0, 360, allow_nan=False, exclude_max=True))
def test_rotation_is_steering_combination(d, alpha):
    kx = ft1_kernel(d)
    r = rotate_kernel(kx, kx.T, alpha).weights
    ref = kx.weights * math.cos(math.radians(alpha)) + kx.weights.T * math.sin(math.radians(alpha))
    np.testing.assert_allclose(r, ref, rtol=0, atol=1e-12)
