import numpy as np
import pytest
from src.equivariant import (
    CyclicGroup,
    channel_pool,
    cyclic_shift,
    group_conv,
    group_pool_max,
    lift_conv,
    rotate_bank,
    rotate_kernel,
)
from src.errors import ShapeError
from src.tensor import conv2d


def gaussian_kernel(size=5, sigma=2.0):
    r = np.arange(size) - size // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return k / np.linalg.norm(k)


def turn(x, quarters=1):
    return np.rot90(x, quarters, axes=(-2, -1))


class TestCyclicGroup:
    def test_angles(self):
        group = CyclicGroup(36)
        assert group.bin_width == 10.0
        assert group.angle(37) == 10.0
        assert group.quarter == 9

    def test_quarter_turn_needs_divisibility(self):
        assert not CyclicGroup(6).has_quarter_turn
        with pytest.raises(ShapeError):
            CyclicGroup(6).quarter


class TestRotateKernel:
    def test_identity_element(self, rng):
        k = rng.standard_normal((5, 5))
        np.testing.assert_array_equal(rotate_kernel(k, 0, 36), k)

    @pytest.mark.parametrize("order", [4, 8, 36])
    def test_quarter_turn_is_exact(self, rng, order):
        k = rng.standard_normal((5, 5))
        expected = np.array([[k[j, 4 - i] for j in range(5)] for i in range(5)])
        np.testing.assert_array_equal(rotate_kernel(k, order // 4, order), expected)

    @pytest.mark.parametrize("order", [8, 36])
    def test_round_trip(self, order):
        for sigma in (2.0, 2.2):
            k = gaussian_kernel(sigma=sigma)
            for g in range(1, order):
                back = rotate_kernel(rotate_kernel(k, g, order), order - g, order)
                assert np.abs(back - k).max() <= 0.15
                assert np.abs(back - k)[1:4, 1:4].max() <= 0.05

    def test_bank_matches_single_rotations(self, rng):
        base = rng.standard_normal((3, 2, 5, 5))
        bank = rotate_bank(base, 8)
        assert bank.shape == (8, 3, 2, 5, 5)
        np.testing.assert_allclose(bank[3, 1, 0], rotate_kernel(base[1, 0], 3, 8), atol=1e-12)

    def test_even_kernel(self):
        with pytest.raises(ShapeError):
            rotate_kernel(np.zeros((4, 4)), 1, 8)


class TestLiftConv:
    def test_delta_kernel_copies_input(self, rng):
        x = rng.standard_normal((1, 9, 9))
        delta = np.zeros((1, 1, 5, 5))
        delta[0, 0, 2, 2] = 1.0
        out = lift_conv(x, delta, 4)
        assert out.shape == (4, 1, 9, 9)
        for g in range(4):
            np.testing.assert_array_equal(out[g, 0], x[0])

    def test_quarter_turn_equivariance(self, rng):
        x = rng.standard_normal((2, 1, 12, 12))
        base = rng.standard_normal((3, 1, 5, 5))
        out = lift_conv(x, base, 8)
        turned = lift_conv(np.ascontiguousarray(turn(x)), base, 8)
        np.testing.assert_allclose(turned, np.roll(turn(out), 2, axis=1), atol=1e-12)

    def test_matches_loop_over_rotated_kernels(self, rng):
        x = rng.standard_normal((1, 2, 10, 10))
        base = rng.standard_normal((2, 2, 5, 5))
        out = lift_conv(x, base, 6)
        for g in range(6):
            kernel = np.array([[rotate_kernel(base[co, ci], g, 6) for ci in range(2)] for co in range(2)])
            np.testing.assert_allclose(out[:, g], conv2d(x, kernel, padding=2), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            lift_conv(np.zeros((1, 2, 8, 8)), np.zeros((1, 1, 3, 3)), 4)


class TestGroupConv:
    def test_symmetric_input_and_kernel(self, rng):
        slice_ = rng.standard_normal((2, 9, 9))
        x = np.repeat(slice_[None], 4, axis=0)
        weights = rng.standard_normal((3, 2))
        base = np.zeros((3, 4 * 2, 5, 5))
        base[:, :, 2, 2] = np.tile(weights, (1, 4))
        out = group_conv(x, base, 4)
        for g in range(1, 4):
            np.testing.assert_allclose(out[g], out[0], atol=1e-12)

    def test_quarter_turn_equivariance(self, rng):
        x = rng.standard_normal((1, 8, 2, 12, 12))
        base = rng.standard_normal((3, 16, 5, 5))
        out = group_conv(x, base, 8)
        moved = np.ascontiguousarray(np.roll(turn(x), 2, axis=1))
        np.testing.assert_allclose(group_conv(moved, base, 8), np.roll(turn(out), 2, axis=1), atol=1e-11)

    def test_matches_direct_sum(self, rng):
        order, cin, cout = 4, 2, 3
        x = rng.standard_normal((order, cin, 8, 8))
        base = rng.standard_normal((cout, order * cin, 3, 3))
        out = group_conv(x, base, order)
        for g in range(order):
            for c in range(cout):
                expected = np.zeros((8, 8))
                for h in range(order):
                    for ci in range(cin):
                        k = rotate_kernel(base[c, ((h - g) % order) * cin + ci], g, order)
                        expected += conv2d(x[h, ci][None], k[None, None], padding=1)[0]
                np.testing.assert_allclose(out[g, c], expected, atol=1e-11)

    def test_pointwise_kernel_is_a_cyclic_correlation(self):
        # out[g] = sum_h x[h] * w[(h - g) mod 4]
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1, 1)
        base = np.array([10.0, 100.0, 1000.0, 10000.0]).reshape(1, 4, 1, 1)
        out = group_conv(x, base, 4)
        assert out.shape == (4, 1, 1, 1)
        np.testing.assert_allclose(out.ravel(), [43210.0, 14320.0, 21430.0, 32140.0], rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            group_conv(np.zeros((8, 2, 8, 8)), np.zeros((1, 8, 3, 3)), 8)


class TestPooling:
    def test_group_max_of_constant_input(self, rng):
        slice_ = rng.standard_normal((3, 4, 4))
        x = np.repeat(slice_[None], 6, axis=0)
        np.testing.assert_array_equal(group_pool_max(x), slice_)

    def test_group_max_ignores_shifts(self, rng):
        x = rng.standard_normal((2, 8, 3, 5, 5))
        np.testing.assert_array_equal(group_pool_max(np.roll(x, 3, axis=1)), group_pool_max(x))
        np.testing.assert_array_equal(group_pool_max(x), x.max(axis=1))

    def test_channel_pool_single_unit_weight(self, rng):
        x = rng.standard_normal((8, 1, 5, 5))
        np.testing.assert_array_equal(channel_pool(x, np.array([1.0])), x[:, 0])

    def test_channel_pool_zero_weight(self, rng):
        x = rng.standard_normal((8, 3, 5, 5))
        np.testing.assert_array_equal(channel_pool(x, np.zeros(3)), 0.0)

    @pytest.mark.parametrize("mode", ["conv", "max", "avg"])
    def test_channel_pool_commutes_with_shifts(self, rng, mode):
        x = rng.standard_normal((2, 8, 3, 5, 5))
        weight = rng.standard_normal(3) if mode == "conv" else None
        shifted = channel_pool(np.roll(x, 5, axis=1), weight, mode)
        np.testing.assert_array_equal(shifted, np.roll(channel_pool(x, weight, mode), 5, axis=1))

    def test_channel_pool_modes(self, rng):
        x = rng.standard_normal((4, 3, 2, 2))
        np.testing.assert_array_equal(channel_pool(x, mode="max"), x.max(axis=1))
        np.testing.assert_allclose(channel_pool(x, mode="avg"), x.mean(axis=1), rtol=1e-12)
        with pytest.raises(ValueError):
            channel_pool(x, mode="sum")


def test_cyclic_shift_identities(rng):
    x = rng.standard_normal((8, 3, 3))
    np.testing.assert_array_equal(cyclic_shift(x, 0), x)
    np.testing.assert_array_equal(cyclic_shift(x, 8), x)
    np.testing.assert_array_equal(cyclic_shift(x, 1)[1], x[0])


def test_cyclic_shifts_compose_additively(rng):
    x = rng.standard_normal((8, 2, 3, 3))
    for k1, k2 in rng.integers(-20, 20, (50, 2)):
        composed = cyclic_shift(cyclic_shift(x, int(k1)), int(k2))
        np.testing.assert_array_equal(composed, cyclic_shift(x, int(k1 + k2)))
        np.testing.assert_array_equal(composed, cyclic_shift(x, int((k1 + k2) % 8)))
