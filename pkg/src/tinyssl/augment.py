"""Image augmentation primitives and the three-phase curriculum.

Images are float arrays shaped (3, H, W) with values in [0, 1]. Every
random draw comes from an explicit generator; :func:`stream` derives one
from (seed, epoch, image index, view index) so results do not depend on
iteration order or worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import convolve1d


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugPolicy:
    crop_scale_min: float = 0.08
    crop_scale_max: float = 1.0
    color_jitter_strength: float = 0.4  # brightness/contrast/saturation; hue gets a quarter
    jitter_prob: float = 0.8
    hflip_prob: float = 0.5
    blur_enabled: bool = False
    blur_sigma_range: tuple = (0.1, 2.0)
    blur_prob: float = 0.5
    solarize_enabled: bool = False
    solarize_threshold: float = 0.5
    solarize_prob: float = 0.2

    def __post_init__(self):
        if not 0 < self.crop_scale_min <= self.crop_scale_max <= 1:
            raise AugmentError(f"crop scale range ({self.crop_scale_min}, {self.crop_scale_max}) "
                               "must satisfy 0 < min <= max <= 1")
        for name in ("jitter_prob", "hflip_prob", "blur_prob", "solarize_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise AugmentError(f"{name} must be a probability, got {p}")


IDENTITY = AugPolicy(crop_scale_min=1.0, crop_scale_max=1.0, color_jitter_strength=0.0,
                     jitter_prob=0.0, hflip_prob=0.0)

PHASE_POLICIES = (
    AugPolicy(crop_scale_min=0.5, color_jitter_strength=0.2),
    AugPolicy(crop_scale_min=0.2, color_jitter_strength=0.4),
    AugPolicy(crop_scale_min=0.08, color_jitter_strength=0.4, blur_enabled=True, solarize_enabled=True),
)


@dataclass(frozen=True)
class CurriculumPolicy:
    total_epochs: int = 100
    phase_fractions: tuple = (0.25, 0.50, 0.25)
    phases: tuple = PHASE_POLICIES
    enabled: bool = True

    def __post_init__(self):
        if self.total_epochs < 1:
            raise AugmentError("total_epochs must be >= 1")
        if abs(sum(self.phase_fractions) - 1.0) > 1e-9 or len(self.phase_fractions) != 3:
            raise AugmentError(f"phase fractions must be three values summing to 1, got {self.phase_fractions}")

    def boundaries(self):
        """Last epoch of phases 1 and 2."""
        E, f = self.total_epochs, self.phase_fractions
        # round before ceil so 0.25 * 100 stays 25 rather than 25.000000000000004
        return (math.ceil(round(f[0] * E, 9)), math.ceil(round((f[0] + f[1]) * E, 9)))


def phase_for_epoch(cur: CurriculumPolicy, epoch: int) -> int:
    if not 1 <= epoch <= cur.total_epochs:
        raise AugmentError(f"epoch {epoch} outside 1..{cur.total_epochs}")
    if not cur.enabled:
        return 3
    b1, b2 = cur.boundaries()
    return 1 if epoch <= b1 else 2 if epoch <= b2 else 3


def policy_for_phase(cur: CurriculumPolicy, phase: int) -> AugPolicy:
    if phase not in (1, 2, 3):
        raise AugmentError(f"phase must be 1, 2 or 3, got {phase}")
    return cur.phases[phase - 1]


def stream(seed, epoch, index, view):
    return np.random.default_rng([seed, epoch, index, view])


# --- primitives ---------------------------------------------------------------

def sample_crop(H, W, scale, rng, ratio=(3 / 4, 4 / 3)):
    """Random-resized-crop box (top, left, height, width); falls back to a centre crop."""
    area = H * W
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    in_ratio = W / H
    if in_ratio < ratio[0]:
        w, h = W, int(round(W / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = H, int(round(H * ratio[1]))
    else:
        h, w = H, W
    return (H - h) // 2, (W - w) // 2, h, w


def resample_box(img, box, out_hw, flip=False):
    """Bilinear sample of ``box`` = (top, left, h, w) from a (C, H, W) map onto ``out_hw``.

    Half-pixel centres; sampling the full map at its own size is exact.
    """
    C, H, W = img.shape
    top, left, bh, bw = box
    oh, ow = out_hw
    ys = top + (np.arange(oh) + 0.5) * (bh / oh) - 0.5
    xs = left + (np.arange(ow) + 0.5) * (bw / ow) - 0.5
    if flip:
        xs = xs[::-1]
    ys = np.clip(ys, 0, H - 1)
    xs = np.clip(xs, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0).astype(img.dtype)[:, None]
    wx = (xs - x0).astype(img.dtype)[None, :]
    top_row = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot_row = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top_row * (1 - wy) + bot_row * wy


def resize(img, out_hw):
    return resample_box(img, (0, 0, img.shape[1], img.shape[2]), out_hw)


def _gray(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def color_jitter(img, strength, rng):
    s = strength
    b, c, sat = (rng.uniform(max(0.0, 1 - s), 1 + s) for _ in range(3))
    hue = rng.uniform(-s / 4, s / 4)
    out = np.clip(img * b, 0, 1)
    m = _gray(out).mean()
    out = np.clip((out - m) * c + m, 0, 1)
    g = _gray(out)[None]
    out = np.clip((out - g) * sat + g, 0, 1)
    if hue != 0:
        hsv = rgb_to_hsv(np.moveaxis(out, 0, -1))
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        out = np.moveaxis(hsv_to_rgb(hsv), -1, 0)
    return out


def gaussian_blur(img, sigma):
    side = img.shape[1]
    k = max(3, int(round(0.1 * side)) | 1)  # nearest odd size to 10% of the side
    r = k // 2
    x = np.arange(-r, r + 1)
    kern = np.exp(-(x * x) / (2 * sigma * sigma))
    kern /= kern.sum()
    out = convolve1d(img, kern, axis=1, mode="reflect")
    return convolve1d(out, kern, axis=2, mode="reflect")


def solarize(img, threshold):
    return np.where(img >= threshold, 1 - img, img)


def augment_image(img, policy: AugPolicy, rng, out_hw=None, return_params=False):
    """Crop, flip, jitter, blur, solarize in that order; output clamped to [0, 1]."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise AugmentError(f"expected a (3, H, W) image, got {img.shape}")
    _, H, W = img.shape
    out_hw = out_hw or (H, W)
    box = sample_crop(H, W, (policy.crop_scale_min, policy.crop_scale_max), rng)
    flip = bool(rng.random() < policy.hflip_prob)
    out = resample_box(img, box, out_hw, flip)
    if rng.random() < policy.jitter_prob and policy.color_jitter_strength > 0:
        out = color_jitter(out, policy.color_jitter_strength, rng)
    if policy.blur_enabled and rng.random() < policy.blur_prob:
        out = gaussian_blur(out, rng.uniform(*policy.blur_sigma_range))
    if policy.solarize_enabled and rng.random() < policy.solarize_prob:
        out = solarize(out, policy.solarize_threshold)
    out = np.clip(out, 0, 1).astype(np.float32)
    if return_params:
        return out, {"box": box, "flip": flip, "source_hw": (H, W)}
    return out


def make_view_pair(img, policy: AugPolicy, rng, out_hw=None):
    return augment_image(img, policy, rng, out_hw), augment_image(img, policy, rng, out_hw)
