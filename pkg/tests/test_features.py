import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.errors import RejectedInputError
from src.features import (
    assess_fatigue,
    closed_runs,
    consecutive_closed,
    default_window,
    fatigue_judgment,
    feature_image,
    gabor_bank,
    gabor_kernel,
    lbp_map,
    perclos,
    states_from_predictions,
)
from src.models import FrameStateSequence, GaborParams


def gabor_formula(x, y, theta, wavelength, sigma, gamma, psi):
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    return math.exp(-(xr ** 2 + gamma ** 2 * yr ** 2) / (2 * sigma ** 2)) * math.cos(2 * math.pi * xr / wavelength + psi)


def naive_convolution(image, kernel):
    kh, kw = kernel.shape
    out = np.zeros((image.shape[0] - kh + 1, image.shape[1] - kw + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for a in range(kh):
                for b in range(kw):
                    out[i, j] += image[i + a, j + b] * kernel[kh - 1 - a, kw - 1 - b]
    return out


class TestGabor:
    def test_center_is_one(self):
        kernel = gabor_kernel(GaborParams(theta=0.3, wavelength=4, sigma=2))
        assert kernel[3, 3] == 1.0

    def test_symmetric_for_zero_theta(self):
        kernel = gabor_kernel(GaborParams(theta=0.0, wavelength=4, sigma=2))
        assert_array_equal(kernel, kernel[::-1, :])

    @pytest.mark.parametrize("theta", [0.0, math.pi / 4, 1.1])
    def test_matches_scalar_formula(self, theta):
        p = GaborParams(theta=theta, wavelength=4, sigma=2, gamma=0.5, psi=0.0, size=7)
        kernel = gabor_kernel(p)
        for i in range(7):
            for j in range(7):
                expected = gabor_formula(j - 3, i - 3, theta, 4, 2, 0.5, 0.0)
                assert abs(kernel[i, j] - expected) < 1e-6

    def test_lambda_alias(self):
        assert GaborParams(**{"lambda": 8.0}).wavelength == 8.0

    def test_even_size_rejected(self):
        with pytest.raises(ValueError):
            GaborParams(size=6)

    def test_bank_channel_count(self):
        bank = gabor_bank(np.random.default_rng(0).random((20, 20)), orientations=4, scales=2)
        assert bank.shape == (14, 14, 8)

    def test_odd_phase_rejects_constant_image(self):
        bank = gabor_bank(np.full((16, 16), 0.7), psi=math.pi / 2)
        assert np.max(np.abs(bank)) < 1e-5

    def test_single_kernel_matches_naive_convolution(self):
        image = np.random.default_rng(1).random((12, 11))
        bank = gabor_bank(image, orientations=1, scales=1)
        kernel = gabor_kernel(GaborParams(theta=0.0, wavelength=4.0, sigma=0.56 * 4.0)).astype(np.float64)
        assert_allclose(bank[:, :, 0], naive_convolution(image, kernel), atol=1e-5)

    def test_linear_in_the_image(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert np.max(np.abs(gabor_bank(a + b) - gabor_bank(a) - gabor_bank(b))) < 1e-4

    def test_image_smaller_than_kernel(self):
        with pytest.raises(RejectedInputError):
            gabor_bank(np.zeros((5, 5)))


class TestLbp:
    def test_hand_computed_code(self):
        patch = np.array([[1, 2, 3], [4, 5, 6], [7, 8, 9]], dtype=float)
        assert lbp_map(patch)[0, 0] == 30

    def test_constant_image(self):
        assert np.all(lbp_map(np.full((6, 5), 0.4)) == 255)

    def test_strict_maximum_center(self):
        patch = np.zeros((3, 3))
        patch[1, 1] = 1.0
        assert lbp_map(patch)[0, 0] == 0

    def test_shape_and_monotone_invariance(self):
        image = np.random.default_rng(3).random((10, 9))
        codes = lbp_map(image)
        assert codes.shape == (8, 7)
        assert_array_equal(codes, lbp_map(np.exp(3 * image) + 1))

    def test_too_small(self):
        with pytest.raises(RejectedInputError):
            lbp_map(np.zeros((2, 5)))


class TestFeatureImage:
    @pytest.mark.parametrize("kind", ["lbp", "gabor"])
    def test_same_size_unit_range(self, kind):
        image = np.random.default_rng(4).random((16, 16, 1))
        fmap = feature_image(image, kind)
        assert fmap.shape == (16, 16, 1)
        assert fmap.min() >= 0.0 and fmap.max() <= 1.0

    def test_unknown_kind(self):
        with pytest.raises(RejectedInputError):
            feature_image(np.zeros((16, 16)), "hog")


def seq(pattern: str, fps: float = 30.0) -> FrameStateSequence:
    return FrameStateSequence(states=["closed" if c == "C" else "open" for c in pattern], fps=fps)


class TestPerclos:
    def test_all_open(self):
        assert_array_equal(perclos(seq("OOOOO"), 2), np.zeros(4))

    def test_all_closed(self):
        assert_array_equal(perclos(seq("CCCC"), 3), np.ones(2))

    def test_three_of_ten(self):
        assert perclos(seq("COOCCOOOOO"), 10).tolist() == [0.3]

    def test_window_out_of_range(self):
        with pytest.raises(RejectedInputError):
            perclos(seq("COC"), 4)
        with pytest.raises(RejectedInputError):
            perclos(seq("COC"), 0)

    def test_default_window_is_two_seconds(self):
        assert default_window(seq("O" * 100, fps=25)) == 50
        assert default_window(seq("O" * 10, fps=25)) == 10


class TestFatigue:
    def test_below_threshold(self):
        assert fatigue_judgment([0.1], 0.4) == ["alert"]

    def test_boundary_is_fatigued(self):
        assert fatigue_judgment([0.4], 0.4) == ["fatigued"]

    def test_raising_threshold_is_monotone(self):
        values = np.random.default_rng(5).random(50)
        counts = [fatigue_judgment(values, t).count("fatigued") for t in (0.2, 0.4, 0.6, 0.8)]
        assert counts == sorted(counts, reverse=True)

    def test_invalid_threshold(self):
        with pytest.raises(RejectedInputError):
            fatigue_judgment([0.5], 1.0)


class TestBlinkRuns:
    def test_closed_runs(self):
        assert closed_runs(seq("CCOOCCCO")) == [(0, 2), (4, 3)]

    def test_consecutive_rule(self):
        assert consecutive_closed(seq("CCOOCCCO"), 3) == [False] * 4 + [True] * 3 + [False]

    def test_states_from_predictions(self):
        assert states_from_predictions([0, 1, 1], fps=10).states == ["open", "closed", "closed"]


class TestAssessFatigue:
    def test_long_closure_is_fatigued(self):
        state = assess_fatigue(3, [1] * 20 + [0] * 40, fps=10)
        assert state.client_id == 3
        assert state.frames == 60
        assert state.closed_fraction == pytest.approx(1 / 3)
        assert state.peak_perclos == 1.0
        assert state.judgment == "fatigued"

    def test_sparse_blinks_stay_alert(self):
        state = assess_fatigue(0, [0, 0, 0, 1] * 15, fps=10)
        assert state.peak_perclos == pytest.approx(0.25)
        assert state.judgment == "alert"

    def test_threshold_and_closed_class_are_honored(self):
        assert assess_fatigue(0, [0, 0, 0, 1] * 15, fps=10, threshold=0.25).judgment == "fatigued"
        flipped = assess_fatigue(0, [0, 0, 0, 1] * 15, fps=10, closed_class=0)
        assert flipped.closed_fraction == pytest.approx(0.75)

    def test_no_frames_is_alert(self):
        state = assess_fatigue(1, [], fps=30)
        assert (state.frames, state.peak_perclos, state.judgment) == (0, 0.0, "alert")
