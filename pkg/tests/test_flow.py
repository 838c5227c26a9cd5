import numpy as np
import pytest

from conftest import frame, textured
from fruitcount.flow import (
    DimensionMismatch,
    FlowConfig,
    FlowVector,
    LucasKanadeFlow,
    PointOutOfBounds,
    build_pyramid,
    estimate_flow,
    mean_flow,
)

SHAPE = (120, 160)
POINTS = [(60.0, 80.0), (40.5, 50.25), (80.0, 110.0)]


def shifted_pair(du, dv, seed=0):
    return frame(textured(SHAPE, seed)), frame(textured(SHAPE, seed, shift=(du, dv)), 1)


class TestEstimateFlow:
    def test_identical_frames(self):
        a, _ = shifted_pair(0, 0)
        flows = estimate_flow(a, a, POINTS)
        for f in flows:
            assert f.valid
            assert np.allclose(f.d, 0.0, atol=1e-6)

    def test_integer_column_shift(self):
        a = frame(np.random.default_rng(0).uniform(0, 255, SHAPE))
        b = frame(np.roll(a.pixels, 3, axis=1), 1)
        for f in estimate_flow(a, b, [(60.0, 80.0), (30.0, 40.0)]):
            assert f.valid
            assert abs(f.d[0]) < 0.1 and abs(f.d[1] - 3.0) < 0.1

    def test_flat_patch_is_invalid(self):
        img = np.full(SHAPE, 100.0)
        (f,) = estimate_flow(frame(img), frame(img, 1), [(60.0, 80.0)])
        assert not f.valid

    @pytest.mark.parametrize("shift", [(0.5, 0.0), (2.3, -1.7), (-4.0, 6.5), (7.5, 9.0)])
    def test_subpixel_translation(self, shift):
        a, b = shifted_pair(*shift, seed=3)
        for f in estimate_flow(a, b, POINTS):
            assert f.valid
            assert np.hypot(f.d[0] - shift[0], f.d[1] - shift[1]) < 0.2

    def test_symmetry(self):
        a, b = shifted_pair(3.2, -5.1, seed=4)
        fwd = estimate_flow(a, b, [(60.0, 80.0)])[0].d
        (bwd,) = estimate_flow(b, a, [(60.0 + 3.2, 80.0 - 5.1)])
        assert abs(fwd[0] + bwd.d[0]) < 0.3 and abs(fwd[1] + bwd.d[1]) < 0.3

    def test_initial_guess_per_point(self):
        a, b = shifted_pair(1.0, 20.0, seed=5)
        cfg = FlowConfig(pyramid_levels=1)
        flows = estimate_flow(a, b, POINTS[:2], initial_guess=[(1.0, 19.0), (1.0, 20.5)], config=cfg)
        for f in flows:
            assert f.valid and abs(f.d[1] - 20.0) < 0.2

    def test_deterministic(self):
        a, b = shifted_pair(2.0, 3.0, seed=6)
        assert estimate_flow(a, b, POINTS) == estimate_flow(a, b, POINTS)

    def test_displacement_limit_marks_invalid(self):
        a, b = shifted_pair(0.0, 6.0, seed=7)
        cfg = FlowConfig(max_displacement=2.0)
        assert not estimate_flow(a, b, [(60.0, 80.0)], config=cfg)[0].valid

    def test_point_near_border_is_clamped_not_error(self):
        a, b = shifted_pair(0.0, 1.0, seed=8)
        (f,) = estimate_flow(a, b, [(1.0, 1.0)])
        assert np.all(np.isfinite(f.d))

    def test_point_outside_image(self):
        a, b = shifted_pair(0, 0)
        with pytest.raises(PointOutOfBounds):
            estimate_flow(a, b, [(-5.0, 10.0)])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            estimate_flow(np.zeros((10, 10)), np.zeros((10, 11)), [(5.0, 5.0)])

    def test_no_points(self):
        a, b = shifted_pair(0, 0)
        assert estimate_flow(a, b, []) == []

    def test_provider_wrapper(self):
        a, b = shifted_pair(1.0, 2.0, seed=9)
        lk = LucasKanadeFlow()
        assert lk(a, b, POINTS) == estimate_flow(a, b, POINTS)


class TestConfig:
    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            FlowConfig(window=20)

    def test_pyramid_halves(self):
        levels = build_pyramid(np.zeros((120, 160)), 3)
        assert [lv.shape for lv in levels] == [(120, 160), (60, 80), (30, 40)]


class TestMeanFlow:
    def test_empty(self):
        assert mean_flow([]) == (0.0, 0.0)

    def test_average(self):
        assert mean_flow([FlowVector((1, 2), True), FlowVector((3, 4), True)]) == (2.0, 3.0)

    def test_invalid_excluded(self):
        assert mean_flow([FlowVector((1, 2), True), FlowVector((100, 100), False)]) == (1.0, 2.0)
