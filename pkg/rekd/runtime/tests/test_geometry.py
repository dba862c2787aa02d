import math

import numpy as np
import pytest
from src.errors import ShapeError
from src.geometry import (
    RotTransform,
    inside,
    snapped_trig,
    validity_mask,
    warp_image,
    warp_operator,
    warp_points,
)


def test_snapped_trig_is_exact_on_quarter_turns():
    assert snapped_trig(90.0) == (0.0, 1.0)
    assert snapped_trig(-90.0) == (0.0, -1.0)
    assert snapped_trig(540.0) == (-1.0, 0.0)
    c, s = snapped_trig(30.0)
    assert c == pytest.approx(math.sqrt(3) / 2)
    assert s == pytest.approx(0.5)


class TestWarpImage:
    def test_zero_angle_is_identity(self, rng):
        img = rng.uniform(size=(12, 17))
        warped, mask = warp_image(img, RotTransform(0.0, (17, 12), (17, 12)))
        np.testing.assert_array_equal(warped, img)
        assert mask.all()

    def test_quarter_turn_is_a_pixel_permutation(self, rng):
        img = rng.uniform(size=(9, 9))
        warped, mask = warp_image(img, RotTransform.square(90.0, 9))
        h = img.shape[0]
        expected = np.array([[img[j, h - 1 - i] for j in range(h)] for i in range(h)])
        np.testing.assert_array_equal(warped, expected)
        np.testing.assert_array_equal(warped, np.rot90(img))
        assert mask.all()

    def test_half_turn_and_stacks(self, rng):
        img = rng.uniform(size=(3, 8, 8))
        warped, _ = warp_image(img, RotTransform.square(180.0, 8))
        np.testing.assert_array_equal(warped, np.rot90(img, 2, axes=(1, 2)))

    def test_45_degree_mask_area(self):
        size = 201
        mask = validity_mask(RotTransform.square(45.0, size))
        assert not mask[0, 0] and not mask[-1, -1]
        assert mask[size // 2, size // 2]
        # a square intersected with itself turned by 45 degrees keeps 2*sqrt(2) - 2 of its area
        assert mask.mean() == pytest.approx(2 * math.sqrt(2) - 2, rel=0.02)

    def test_adjoint(self, rng):
        op = warp_operator(RotTransform(33.0, (11, 7), (9, 13)))
        x = rng.standard_normal((7, 11))
        y = rng.standard_normal((13, 9))
        assert np.sum(op.apply(x) * y) == pytest.approx(np.sum(x * op.adjoint(y)), rel=1e-12)

    def test_wrong_extent(self):
        with pytest.raises(ShapeError):
            warp_operator(RotTransform.square(10.0, 8)).apply(np.zeros((7, 8)))


class TestPoints:
    def test_identity(self, rng):
        pts = rng.uniform(0, 50, (20, 2))
        np.testing.assert_array_equal(warp_points(pts, RotTransform.identity((50, 50))), pts)

    def test_center_is_fixed(self):
        for angle in (13.0, 90.0, -170.0):
            out = RotTransform(angle, (40, 30), (40, 30)).apply([[19.5, 14.5]])
            np.testing.assert_allclose(out, [[19.5, 14.5]], atol=1e-12)

    def test_round_trip(self, rng):
        transform = RotTransform(27.3, (64, 48), (80, 80))
        pts = rng.uniform(0, 48, (100, 2))
        back = transform.inverse().apply(transform.apply(pts))
        assert np.abs(back - pts).max() < 1e-6

    def test_quarter_turn_matches_image_turn(self):
        transform = RotTransform.square(90.0, 10)
        img = np.zeros((10, 10))
        img[2, 7] = 1.0
        warped, _ = warp_image(img, transform)
        x, y = transform.apply([[7, 2]])[0]
        assert warped[int(y), int(x)] == 1.0

    def test_compose(self):
        first = RotTransform(30.0, (20, 20), (30, 30))
        second = RotTransform(60.0, (30, 30), (20, 20))
        both = first.compose(second)
        pts = np.array([[3.0, 4.0], [10.0, 1.0]])
        np.testing.assert_allclose(both.apply(pts), second.apply(first.apply(pts)), atol=1e-9)
        assert both.angle_deg == 90.0
        with pytest.raises(ShapeError):
            first.compose(first)

    def test_inside(self):
        flags = inside([[0, 0], [9, 4], [9.5, 0], [-0.1, 2]], (10, 5))
        np.testing.assert_array_equal(flags, [True, True, False, False])


@pytest.mark.parametrize("angle", [0.0, 360.0, -720.0])
def test_full_turns_leave_points_untouched(rng, angle):
    pts = rng.uniform(-5, 70, (40, 2))
    np.testing.assert_array_equal(RotTransform(angle, (64, 48), (64, 48)).apply(pts), pts)


@pytest.mark.parametrize("angle", [17.0, 90.0, -133.0])
def test_masked_pixels_round_trip(angle):
    transform = RotTransform(angle, (40, 30), (40, 30))
    ys, xs = np.nonzero(validity_mask(transform))
    dst = np.stack([xs, ys], axis=1).astype(np.float64)
    src = transform.source_of(dst)
    assert np.abs(transform.apply(src) - dst).max() < 0.5
    np.testing.assert_allclose(transform.apply(src), dst, atol=1e-9)
