import numpy as np
import pytest
from hypothesis import given, strategies as st

from tinyssl.augment import (IDENTITY, AugmentError, AugPolicy, CurriculumPolicy, augment_image,
                             gaussian_blur, make_view_pair, phase_for_epoch, policy_for_phase, resize,
                             resample_box, sample_crop, solarize, stream)


def image(seed=0, side=16):
    return np.random.default_rng(seed).random((3, side, side)).astype(np.float32)


@pytest.mark.parametrize("epoch,phase", [(1, 1), (25, 1), (26, 2), (75, 2), (76, 3), (100, 3)])
def test_hundred_epoch_boundaries(epoch, phase):
    assert phase_for_epoch(CurriculumPolicy(100), epoch) == phase


def test_fractional_boundaries_for_short_runs():
    cur = CurriculumPolicy(20)
    assert phase_for_epoch(cur, 5) == 1 and phase_for_epoch(cur, 6) == 2
    assert CurriculumPolicy(30).boundaries() == (8, 23)


@given(st.integers(1, 400))
def test_phase_monotone(E):
    cur = CurriculumPolicy(E)
    phases = [phase_for_epoch(cur, e) for e in range(1, E + 1)]
    assert phases == sorted(phases) and phases[0] == 1


def test_epoch_out_of_range_rejected():
    with pytest.raises(AugmentError):
        phase_for_epoch(CurriculumPolicy(10), 0)
    with pytest.raises(AugmentError):
        phase_for_epoch(CurriculumPolicy(10), 11)


def test_phase_policies():
    cur = CurriculumPolicy()
    p1, p2, p3 = (policy_for_phase(cur, k) for k in (1, 2, 3))
    assert (p1.crop_scale_min, p2.crop_scale_min, p3.crop_scale_min) == (0.5, 0.2, 0.08)
    assert not (p1.blur_enabled or p1.solarize_enabled or p2.blur_enabled or p2.solarize_enabled)
    assert p3.blur_enabled and p3.solarize_enabled
    assert p1.color_jitter_strength < p2.color_jitter_strength
    with pytest.raises(AugmentError):
        policy_for_phase(cur, 4)


def test_disabled_curriculum_uses_full_policy():
    assert phase_for_epoch(CurriculumPolicy(100, enabled=False), 1) == 3


def test_policy_validation():
    with pytest.raises(AugmentError):
        AugPolicy(crop_scale_min=0.6, crop_scale_max=0.5)
    with pytest.raises(AugmentError):
        AugPolicy(crop_scale_min=0.0)
    with pytest.raises(AugmentError):
        AugPolicy(hflip_prob=1.5)


def test_identity_policy_returns_resized_original():
    img = image(1, 16)
    out = augment_image(img, IDENTITY, stream(0, 1, 0, 0))
    assert np.array_equal(out, img)
    out32 = augment_image(img, IDENTITY, stream(0, 1, 0, 0), (32, 32))
    assert np.allclose(out32, np.clip(resize(img, (32, 32)), 0, 1))


def test_solarize_threshold_zero_inverts():
    img = image(2)
    assert np.allclose(solarize(img, 0.0), 1 - img)


def test_same_stream_same_output():
    img = image(3)
    p = policy_for_phase(CurriculumPolicy(), 3)
    a = augment_image(img, p, stream(7, 3, 11, 0))
    b = augment_image(img, p, stream(7, 3, 11, 0))
    c = augment_image(img, p, stream(7, 3, 11, 1))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_view_pairs():
    img = image(4)
    v1, v2 = make_view_pair(img, IDENTITY, stream(0, 1, 0, 0))
    assert np.array_equal(v1, v2)
    p = policy_for_phase(CurriculumPolicy(), 2)
    a1, a2 = make_view_pair(img, p, stream(0, 1, 0, 0), (32, 32))
    b1, b2 = make_view_pair(img, p, stream(0, 1, 0, 0), (32, 32))
    assert np.array_equal(a1, b1) and np.array_equal(a2, b2)
    assert not np.array_equal(a1, a2)
    assert a1.shape == (3, 32, 32) and 0 <= a1.min() and a1.max() <= 1


def test_outputs_in_unit_range_over_ten_thousand_trials():
    cur = CurriculumPolicy()
    rng = np.random.default_rng(0)
    base = [rng.random((3, 8, 8)).astype(np.float32) for _ in range(16)]
    for trial in range(10_000):
        out = augment_image(base[trial % 16], cur.phases[trial % 3], stream(1, trial, trial % 16, 0))
        assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("smin", [0.08, 0.2, 0.5])
def test_crop_area_fraction_within_policy_range(smin):
    H = W = 96
    rng = np.random.default_rng(int(smin * 100))
    for _ in range(10_000):
        _, _, h, w = sample_crop(H, W, (smin, 1.0), rng)
        slack = 0.5 * (h + w) + 0.25  # integer rounding of each side moves the area by at most this
        assert smin * H * W - slack <= h * w <= H * W


def test_blur_preserves_constants_and_smooths():
    flat = np.full((3, 16, 16), 0.3)
    assert np.allclose(gaussian_blur(flat, 1.5), flat)
    noisy = image(5)
    assert gaussian_blur(noisy, 1.5).std() < noisy.std()


def test_resample_identity_and_constant():
    img = image(6)
    assert np.array_equal(resample_box(img, (0, 0, 16, 16), (16, 16)), img)
    const = np.full((2, 5, 7), 0.25)
    for hw in ((3, 3), (11, 4), (1, 1)):
        assert np.allclose(resample_box(const, (1.2, 0.5, 3.3, 4.0), hw), 0.25, atol=1e-12)


def test_flip_mirrors_columns():
    img = image(7)
    out = resample_box(img, (0, 0, 16, 16), (16, 16), flip=True)
    assert np.array_equal(out, img[:, :, ::-1])
