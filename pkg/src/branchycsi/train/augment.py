"""Training-time augmentation of single-channel radio images.

Random resized crop (area fraction and aspect ratio) with bilinear resize
back to the original size, time-axis reversal, and brightness/contrast
jitter on the amplitude map. Outputs stay in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from ..csi.preprocess import RadioImage


@dataclass(frozen=True)
class AugmentConfig:
    crop: bool = True
    crop_scale: tuple = (0.6, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip: bool = True
    flip_p: float = 0.5
    jitter: bool = True
    brightness: float = 0.2
    contrast: float = 0.2


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _linear_taps(n_out: int, lo: float, length: float, n_in: int):
    """Source indices and weights for resampling ``[lo, lo + length)`` of an axis to ``n_out`` points."""
    pos = lo + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resized_crop(values: np.ndarray, top: float, left: float, height: float, width: float) -> np.ndarray:
    """Bilinear resample of the window ``[top, top+height) x [left, left+width)`` to the full size."""
    H, W = values.shape
    if (top, left, height, width) == (0, 0, H, W):
        return values.copy()
    r0, r1, rw = _linear_taps(H, top, height, H)
    c0, c1, cw = _linear_taps(W, left, width, W)
    v = values.astype(np.float64)
    rows = v[r0] * (1 - rw)[:, None] + v[r1] * rw[:, None]
    out = rows[:, c0] * (1 - cw) + rows[:, c1] * cw
    return out.astype(values.dtype)


def sample_crop(rng: np.random.Generator, shape: tuple, scale: tuple, ratio: tuple) -> tuple:
    """Window (top, left, height, width) covering an area fraction in ``scale``."""
    H, W = shape
    area = rng.uniform(*scale)
    log_r = rng.uniform(math.log(ratio[0]), math.log(ratio[1]))
    r = math.exp(log_r)
    h = min(1.0, math.sqrt(area / r))
    w = min(1.0, area / h)
    top = rng.uniform(0, 1 - h) * H
    left = rng.uniform(0, 1 - w) * W
    return top, left, h * H, w * W


def augment_values(values: np.ndarray, seed, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    rng = _rng(seed)
    out = values
    if cfg.crop:
        window = sample_crop(rng, values.shape, cfg.crop_scale, cfg.crop_ratio)
        out = resized_crop(out, *window)
    if cfg.flip and rng.random() < cfg.flip_p:
        out = out[:, ::-1]
    if cfg.jitter and (cfg.brightness or cfg.contrast):
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        mean = float(out.mean(dtype=np.float64))
        out = np.clip(((out * b) - mean * b) * c + mean * b, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=values.dtype)


def augment(image: Union[RadioImage, np.ndarray], seed, cfg: AugmentConfig = AugmentConfig()):
    """Seeded augmentation; returns the same kind of object it was given."""
    if isinstance(image, RadioImage):
        return RadioImage(augment_values(image.values, seed, cfg), image.rod_label, image.har_label, image.meta)
    return augment_values(np.asarray(image), seed, cfg)
