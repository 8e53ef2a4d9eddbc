"""Blind-spot training pairs: mask a fraction of pixels, replace each with a
random in-window neighbor, and train the network to predict the original
values from context. Includes the standard augmentations (synchronized flips,
extra Gaussian noise on the input)."""

from __future__ import annotations

import dataclasses

import numpy as np

from .imagecore import Image, ValidationError


@dataclasses.dataclass(frozen=True)
class N2VConfig:
    mask_fraction: float = 0.10
    neighborhood_radius: int = 2  # 5x5 window, center excluded
    aug_gaussian_sigma: float = 400.0
    flip_horizontal: bool = True
    flip_vertical: bool = True
    noise_on_target: bool = False
    masked_loss_only: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_fraction < 1.0:
            raise ValidationError("mask_fraction must be in (0, 1)")
        if self.neighborhood_radius < 1:
            raise ValidationError("neighborhood_radius must be >= 1")
        if self.aug_gaussian_sigma < 0:
            raise ValidationError("aug_gaussian_sigma must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")


@dataclasses.dataclass(frozen=True)
class TrainingPair:
    """input: masked and noise-augmented image; target: the (flipped) raw
    image; mask: true at blind-spot pixels. The recorded flips undo the
    augmentation (flips are involutions)."""

    input: Image
    target: Image
    mask: np.ndarray
    flipped_horizontal: bool = False
    flipped_vertical: bool = False


def pair_seed(base_seed: int, pair_index: int) -> int:
    """Per-pair seed so parallel and serial pair construction agree."""
    return base_seed ^ pair_index


def _mask_with_rng(pixels: np.ndarray, cfg: N2VConfig, rng: np.random.Generator):
    h, w = pixels.shape
    if h < 3 or w < 3:
        raise ValidationError(f"masking needs an image of at least 3x3, got {h}x{w}")
    k = int(round(cfg.mask_fraction * w * h))
    masked = pixels.copy()
    mask = np.zeros((h, w), dtype=bool)
    if k == 0:
        return masked, mask
    flat = rng.choice(h * w, size=k, replace=False)
    r = cfg.neighborhood_radius
    for pos in flat:
        i, j = divmod(int(pos), w)
        candidates = [
            (ni, nj)
            for ni in range(max(i - r, 0), min(i + r, h - 1) + 1)
            for nj in range(max(j - r, 0), min(j + r, w - 1) + 1)
            if (ni, nj) != (i, j)
        ]
        ni, nj = candidates[int(rng.integers(len(candidates)))]
        masked[i, j] = pixels[ni, nj]
        mask[i, j] = True
    return masked, mask


def mask_pixels(img: Image, cfg: N2VConfig) -> tuple[Image, np.ndarray]:
    """Replace exactly round(mask_fraction * W * H) distinct pixels, each by a
    uniformly chosen in-bounds neighbor from the (2r+1)^2 window around it
    (center excluded). Deterministic per cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    masked, mask = _mask_with_rng(img.pixels, cfg, rng)
    return Image(masked), mask


def build_pair(raw: Image, cfg: N2VConfig, pair_index: int | None = None) -> TrainingPair:
    """Build one blind-spot pair from a raw image.

    Steps, in fixed draw order: (1) synchronized flips, each axis with
    probability 0.5 when enabled; (2) blind-spot masking of the flipped raw;
    (3) additive Gaussian noise (std aug_gaussian_sigma) on the input's
    unmasked pixels, so masked input values stay exactly equal to their
    replacement neighbors; the target gets noise only if noise_on_target.

    ``pair_index`` derives the seed as cfg.seed XOR pair_index, letting a
    batch of pairs be built in any order with identical results.
    """
    seed = cfg.seed if pair_index is None else pair_seed(cfg.seed, pair_index)
    rng = np.random.default_rng(seed)
    flip_h = bool(rng.random() < 0.5) if cfg.flip_horizontal else False
    flip_v = bool(rng.random() < 0.5) if cfg.flip_vertical else False
    flipped = raw.pixels
    if flip_h:
        flipped = flipped[:, ::-1]
    if flip_v:
        flipped = flipped[::-1, :]
    flipped = np.ascontiguousarray(flipped)

    masked, mask = _mask_with_rng(flipped, cfg, rng)
    inp = masked.copy()
    if cfg.aug_gaussian_sigma > 0:
        noise = rng.normal(0.0, cfg.aug_gaussian_sigma, inp.shape)
        inp[~mask] += noise[~mask]
    target = flipped
    if cfg.noise_on_target and cfg.aug_gaussian_sigma > 0:
        target = flipped + rng.normal(0.0, cfg.aug_gaussian_sigma, flipped.shape)
    return TrainingPair(input=Image(inp), target=Image(target), mask=mask,
                        flipped_horizontal=flip_h, flipped_vertical=flip_v)
