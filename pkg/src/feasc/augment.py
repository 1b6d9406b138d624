"""Two-view stochastic augmentation producing (v, v') from one image.

The default policy is the standard siamese pre-training recipe: random
resized crop (scale 0.2-1.0), horizontal flip p=0.5, color jitter p=0.8 with
strengths (0.4, 0.4, 0.4, 0.1), grayscale p=0.2, and Gaussian blur p=0.5.

All randomness comes from an explicit per-call seed, so a view pair is a pure
function of (image, policy, seed) and parallel data-loading workers stay
reproducible. Per-sample seeds are derived with a splitmix64 mix of
(global_seed, epoch, sample_index) -- see :func:`derive_sample_seed`; Python's
built-in ``hash`` is salted per process and must not be used for this.

Outputs are float tensors in [0, 1] (the whole pipeline runs on 8-bit PIL
images, so values cannot leave that range). Mean/std normalization is left to
the encoder's input BatchNorm rather than baked into the views.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import torch
from PIL import Image, ImageFilter
from torchvision.transforms import functional as TF

from .errors import ValidationError

__all__ = [
    "AugmentPolicy",
    "ViewParams",
    "sample_view_params",
    "apply_view",
    "sample_view_pair",
    "derive_sample_seed",
]

_CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)
_BLUR_SIGMA = (0.1, 2.0)


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    resolution: int = 64

    def __post_init__(self) -> None:
        for name in ("flip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValidationError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.resolution < 32:
            raise ValidationError(f"resolution must be >= 32, got {self.resolution}")

    @classmethod
    def identity(cls, resolution: int = 64) -> "AugmentPolicy":
        """Degenerate policy: both views are the plain resized image."""
        return cls(
            crop_scale=(1.0, 1.0),
            flip_prob=0.0,
            jitter_prob=0.0,
            grayscale_prob=0.0,
            blur_prob=0.0,
            resolution=resolution,
        )


@dataclass(frozen=True)
class ViewParams:
    """One view's sampled transformation parameters (exposed for tests/stats)."""

    crop_box: tuple[int, int, int, int]  # left, top, right, bottom (PIL box)
    flip: bool
    jitter: tuple[float, float, float, float] | None  # brightness/contrast/saturation/hue
    grayscale: bool
    blur_sigma: float | None


def _sample_crop_box(rng: random.Random, width: int, height: int,
                     scale: tuple[float, float]) -> tuple[int, int, int, int]:
    # Standard random-resized-crop sampling; scale (1, 1) short-circuits to the
    # full frame so the identity policy is exact.
    if scale == (1.0, 1.0):
        return (0, 0, width, height)
    area = width * height
    log_lo, log_hi = math.log(_CROP_RATIO[0]), math.log(_CROP_RATIO[1])
    for _ in range(10):
        target_area = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        crop_w = int(round(math.sqrt(target_area * aspect)))
        crop_h = int(round(math.sqrt(target_area / aspect)))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            left = rng.randint(0, width - crop_w)
            top = rng.randint(0, height - crop_h)
            return (left, top, left + crop_w, top + crop_h)
    # Fallback: central crop at the nearest in-range aspect.
    in_ratio = width / height
    if in_ratio < _CROP_RATIO[0]:
        crop_w, crop_h = width, int(round(width / _CROP_RATIO[0]))
    elif in_ratio > _CROP_RATIO[1]:
        crop_h, crop_w = height, int(round(height * _CROP_RATIO[1]))
    else:
        crop_w, crop_h = width, height
    left = (width - crop_w) // 2
    top = (height - crop_h) // 2
    return (left, top, left + crop_w, top + crop_h)


def sample_view_params(policy: AugmentPolicy, rng: random.Random,
                       image_size: tuple[int, int]) -> ViewParams:
    """Draw one view's parameters from ``rng`` (consumes a fixed draw pattern)."""
    width, height = image_size
    crop_box = _sample_crop_box(rng, width, height, policy.crop_scale)
    flip = rng.random() < policy.flip_prob
    jitter = None
    if rng.random() < policy.jitter_prob:
        b, c, s, h = policy.jitter_strength
        jitter = (
            rng.uniform(max(0.0, 1.0 - b), 1.0 + b),
            rng.uniform(max(0.0, 1.0 - c), 1.0 + c),
            rng.uniform(max(0.0, 1.0 - s), 1.0 + s),
            rng.uniform(-h, h),
        )
    grayscale = rng.random() < policy.grayscale_prob
    blur_sigma = rng.uniform(*_BLUR_SIGMA) if rng.random() < policy.blur_prob else None
    return ViewParams(crop_box, flip, jitter, grayscale, blur_sigma)


def apply_view(image: Image.Image, params: ViewParams, resolution: int) -> torch.Tensor:
    """Apply sampled parameters to a PIL image -> float tensor in [0, 1]."""
    view = image.resize((resolution, resolution), Image.BILINEAR, box=params.crop_box)
    if params.flip:
        view = TF.hflip(view)
    if params.jitter is not None:
        brightness, contrast, saturation, hue = params.jitter
        view = TF.adjust_brightness(view, brightness)
        view = TF.adjust_contrast(view, contrast)
        view = TF.adjust_saturation(view, saturation)
        view = TF.adjust_hue(view, hue)
    if params.grayscale:
        view = TF.to_grayscale(view, num_output_channels=3)
    if params.blur_sigma is not None:
        view = view.filter(ImageFilter.GaussianBlur(radius=params.blur_sigma))
    return TF.to_tensor(view)


def sample_view_pair(
    image: Image.Image, policy: AugmentPolicy, seed: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independently augmented views of ``image``; deterministic in (image, seed)."""
    if image.mode != "RGB":
        image = image.convert("RGB")
    rng = random.Random(seed)
    first = sample_view_params(policy, rng, image.size)
    second = sample_view_params(policy, rng, image.size)
    return (
        apply_view(image, first, policy.resolution),
        apply_view(image, second, policy.resolution),
    )


_MASK64 = (1 << 64) - 1


def _splitmix64(value: int) -> int:
    value = (value + 0x9E3779B97F4A7C15) & _MASK64
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & _MASK64
    return value ^ (value >> 31)


def derive_sample_seed(global_seed: int, epoch: int, sample_index: int) -> int:
    """Stable per-sample seed: splitmix64 chain over (seed, epoch, index)."""
    mixed = _splitmix64(global_seed & _MASK64)
    mixed = _splitmix64(mixed ^ (epoch & _MASK64))
    mixed = _splitmix64(mixed ^ (sample_index & _MASK64))
    return mixed & 0x7FFFFFFFFFFFFFFF
