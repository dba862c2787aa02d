import math

import numpy as np
import pytest
from src.errors import NoValidRegionError
from src.geometry import RotTransform
from src.losses import (
    IndexProposalLoss,
    KeypointLoss,
    OrientationAlignmentLoss,
    WindowGrid,
    histogram_shift,
    ip_loss,
    keypoint_loss,
    orientation_alignment_loss,
    soft_coordinates,
    total_loss,
    window_softmax,
)


def one_hot(rng, order, size):
    bins = rng.integers(order, size=(size, size))
    return (np.arange(order)[:, None, None] == bins[None]).astype(np.float64)


def peaked_map(size, window, offset, value=50.0):
    """One peak of `value` at `offset` (x, y) inside every window."""
    k = np.zeros((size, size))
    k[offset[1] :: window, offset[0] :: window] = value
    return k


def numeric_gradient(f, x, coords, eps=1e-6):
    out = []
    for c in coords:
        original = x[c]
        x[c] = original + eps
        plus = f()
        x[c] = original - eps
        minus = f()
        x[c] = original
        out.append((plus - minus) / (2 * eps))
    return np.array(out)


@pytest.mark.parametrize(
    "angle, order, expected", [(0.0, 36, 0), (90.0, 36, 9), (5.0, 36, 1), (-10.0, 36, 35), (44.0, 8, 1)]
)
def test_histogram_shift(angle, order, expected):
    assert histogram_shift(angle, order) == expected


class TestOrientationAlignment:
    def test_identical_one_hots(self, rng):
        o = one_hot(rng, 36, 12)
        assert orientation_alignment_loss(o, o.copy(), RotTransform.identity((12, 12))) == 0.0

    def test_uniform_prediction_costs_log_order(self, rng):
        o_a = one_hot(rng, 36, 10)
        o_b = np.full_like(o_a, 1.0 / 36)
        loss = orientation_alignment_loss(o_a, o_b, RotTransform.identity((10, 10)))
        assert loss == pytest.approx(math.log(36), abs=1e-9)
        assert loss == pytest.approx(3.5835, abs=1e-4)

    def test_quarter_turn_alignment(self, rng):
        o_a = one_hot(rng, 36, 16)
        o_b = np.roll(np.rot90(o_a, axes=(1, 2)), 9, axis=0)
        loss = orientation_alignment_loss(o_a, o_b, RotTransform.square(90.0, 16))
        assert abs(loss) < 1e-6

    def test_empty_mask(self, rng):
        o = one_hot(rng, 8, 6)
        with pytest.raises(NoValidRegionError):
            orientation_alignment_loss(o, o, RotTransform.identity((6, 6)), np.zeros((6, 6)))

    def test_gradients(self, rng):
        transform = RotTransform.square(37.0, 12)
        o_a = rng.dirichlet(np.ones(8), size=(12, 12)).transpose(2, 0, 1)
        o_b = rng.dirichlet(np.ones(8), size=(12, 12)).transpose(2, 0, 1)
        loss = OrientationAlignmentLoss(transform)
        loss.forward(o_a, o_b)
        d_a, d_b = loss.backward(1.0)
        coords = [(1, 5, 6), (7, 2, 3), (3, 6, 6)]
        for x, grad in ((o_a, d_a), (o_b, d_b)):
            numeric = numeric_gradient(lambda: loss.forward(o_a, o_b), x, coords)
            np.testing.assert_allclose([grad[c] for c in coords], numeric, rtol=1e-5, atol=1e-8)


class TestWindows:
    def test_grid_drops_partial_cells(self):
        grid = WindowGrid(8, 20, 35)
        assert (grid.rows, grid.cols, len(grid)) == (2, 4, 8)
        assert tuple(grid.corners()[1, 3]) == (24, 8)

    def test_blocks_round_trip(self, rng):
        grid = WindowGrid(4, 9, 10)
        x = rng.standard_normal((9, 10))
        back = grid.unblocks(grid.blocks(x))
        np.testing.assert_array_equal(back[:8, :8], x[:8, :8])
        assert not back[8:].any() and not back[:, 8:].any()

    def test_softmax_of_constant_window(self):
        maps = window_softmax(np.full((16, 16), 3.0), 8)
        np.testing.assert_allclose(maps, 1.0 / 64, rtol=1e-12)

    def test_softmax_saturates(self):
        k = np.zeros((8, 8))
        k[3, 5] = 50.0
        assert window_softmax(k, 8)[0, 0, 3, 5] >= 1 - 1e-9

    def test_softmax_matches_reference(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            size = int(rng.choice([2, 4, 8]))
            h, w = rng.integers(size, 4 * size, 2)
            k = rng.standard_normal((h, w)) * 3
            maps = window_softmax(k, size)
            assert maps.shape == (h // size, w // size, size, size)
            for i in range(h // size):
                for j in range(w // size):
                    cell = np.exp(k[i * size : (i + 1) * size, j * size : (j + 1) * size])
                    np.testing.assert_allclose(maps[i, j], cell / cell.sum(), rtol=1e-9)

    def test_uniform_map_gives_cell_center(self):
        maps = np.full((2, 3, 8, 8), 1.0 / 64)
        coords = soft_coordinates(maps, WindowGrid(8, 16, 24).corners())
        np.testing.assert_allclose(coords[1, 2], [16 + 3.5, 8 + 3.5], rtol=1e-12)

    def test_one_hot_map_gives_its_position(self):
        maps = np.zeros((1, 1, 8, 8))
        maps[0, 0, 6, 2] = 1.0
        coords = soft_coordinates(maps, np.zeros((1, 1, 2)))
        np.testing.assert_array_equal(coords[0, 0], [2.0, 6.0])

    def test_soft_coordinates_match_weighted_sum(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            n = int(rng.choice([2, 4, 8]))
            maps = rng.uniform(size=(1, 1, n, n))
            corner = rng.integers(0, 100, 2)
            ys, xs = np.mgrid[0:n, 0:n]
            coords = soft_coordinates(maps, corner.reshape(1, 1, 2))
            expected = corner + [(maps[0, 0] * xs).sum(), (maps[0, 0] * ys).sum()]
            np.testing.assert_allclose(coords[0, 0], expected, rtol=1e-12)


class TestIndexProposal:
    def test_coinciding_peaks(self):
        k = peaked_map(32, 8, (3, 5))
        assert ip_loss(k, k.copy(), RotTransform.identity((32, 32)), 8) < 1e-6

    def test_two_pixel_shift(self):
        k_a = peaked_map(32, 8, (2, 2))
        k_b = peaked_map(32, 8, (4, 4))
        assert ip_loss(k_a, k_b, RotTransform.identity((32, 32)), 8) == pytest.approx(8.0, abs=1e-6)

    def test_response_offset_does_not_matter(self, rng):
        k_a, k_b = rng.standard_normal((2, 24, 24))
        transform = RotTransform.square(90.0, 24)
        base = ip_loss(k_a, k_b, transform, 8)
        assert ip_loss(k_a + 3.0, k_b - 2.0, transform, 8) == pytest.approx(base, rel=1e-9)

    def test_quarter_turn_matches_brute_force(self, rng):
        size, n = 24, 8
        k_a, k_b = rng.standard_normal((2, size, size))
        transform = RotTransform.square(90.0, size)
        r_a, r_b = k_a - k_a.min(), k_b - k_b.min()
        warped_b = np.rot90(r_b, -1)  # frame b pulled back into frame a
        terms, alphas = [], []
        for row in range(size // n):
            for col in range(size // n):
                cell = k_a[row * n : (row + 1) * n, col * n : (col + 1) * n]
                m = np.exp(cell - cell.max())
                m /= m.sum()
                ys, xs = np.mgrid[0:n, 0:n]
                soft = np.array([col * n + (m * xs).sum(), row * n + (m * ys).sum()])
                target = warped_b[row * n : (row + 1) * n, col * n : (col + 1) * n]
                iy, ix = np.unravel_index(np.argmax(target), target.shape)
                hard = np.array([col * n + ix, row * n + iy])
                # bilinear response of a at the soft position
                x0, y0 = int(np.floor(soft[0])), int(np.floor(soft[1]))
                fx, fy = soft[0] - x0, soft[1] - y0
                patch = np.pad(r_a, 1)[y0 + 1 : y0 + 3, x0 + 1 : x0 + 3]
                alpha = patch[0, 0] * (1 - fx) * (1 - fy) + patch[0, 1] * fx * (1 - fy)
                alpha += patch[1, 0] * (1 - fx) * fy + patch[1, 1] * fx * fy
                alpha += warped_b[hard[1], hard[0]]
                terms.append(((soft - hard) ** 2).sum())
                alphas.append(alpha)
        alphas = np.array(alphas) / np.sum(alphas)
        expected = float((alphas * np.array(terms)).sum())
        assert ip_loss(k_a, k_b, transform, n) == pytest.approx(expected, rel=1e-5)

    def test_no_surviving_window(self):
        k = np.zeros((16, 16))
        loss = IndexProposalLoss(RotTransform.identity((16, 16)), 8, np.zeros((16, 16)))
        assert loss.forward(k, k) == 0.0
        d_a, d_b = loss.backward(1.0)
        assert not d_a.any() and not d_b.any()

    def test_gradient_with_frozen_proposals(self, rng):
        k_a, k_b = rng.standard_normal((2, 24, 24))
        loss = IndexProposalLoss(RotTransform.square(30.0, 24), 8)
        loss.forward(k_a, k_b)
        loss.freeze()
        d_a, d_b = loss.backward(1.0)
        assert not d_b.any()
        coords = [(10, 10), (3, 12), (17, 9), (12, 14)]
        numeric = numeric_gradient(lambda: loss.forward(k_a, k_b), k_a, coords)
        np.testing.assert_allclose([d_a[c] for c in coords], numeric, rtol=1e-5, atol=1e-9)


class TestKeypointLoss:
    def test_peaked_identical_inputs(self):
        k = peaked_map(48, 8, (4, 4))
        assert keypoint_loss(k, k.copy(), RotTransform.identity((48, 48)), [8], [1.0]) < 1e-6

    def test_swapping_images_and_inverting_transform(self, rng):
        k_a, k_b = rng.standard_normal((2, 48, 48))
        transform = RotTransform.square(23.0, 48)
        forward = keypoint_loss(k_a, k_b, transform, [8, 16, 24], [16.0, 4.0, 1.0])
        swapped = keypoint_loss(k_b, k_a, transform.inverse(), [8, 16, 24], [16.0, 4.0, 1.0])
        assert forward == swapped

    def test_gradients_reach_both_maps(self, rng):
        k_a, k_b = rng.standard_normal((2, 32, 32))
        loss = KeypointLoss(RotTransform.square(15.0, 32), [8, 16], [4.0, 1.0])
        loss.forward(k_a, k_b)
        d_a, d_b = loss.backward(1.0)
        assert d_a.shape == d_b.shape == (32, 32)
        assert d_a.any() and d_b.any()

    def test_mismatched_sizes(self):
        with pytest.raises(ValueError):
            KeypointLoss(RotTransform.identity((8, 8)), [8, 16], [1.0])


@pytest.mark.parametrize(
    "l_ori, l_kpts, expected", [(0.0, 0.0, 0.0), (1.0, 0.0, 100.0), (0.5, 2.0, 52.0)]
)
def test_total_loss(l_ori, l_kpts, expected):
    assert total_loss(l_ori, l_kpts) == expected
