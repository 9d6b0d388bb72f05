"""Masked-blur degradation of the reference frame and intermediate-time initialization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule
from .errors import ConfigurationError, DimensionError
from .video_model import VideoLatent


@dataclass(frozen=True)
class DegradationParams:
    t0: float = 1.0
    p: float = 0.6
    blur_sigma: float = 1.5
    mask_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.t0 <= 1.0:
            raise ConfigurationError(f"t0 must lie in (0, 1], got {self.t0}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"p must lie in [0, 1], got {self.p}")
        if not self.blur_sigma > 0:
            raise ConfigurationError(f"blur_sigma must be positive, got {self.blur_sigma}")

    def start_step(self, T: int) -> int:
        return int(math.floor(self.t0 * T))


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ConfigurationError(f"blur_sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur over the last two axes with reflect padding."""
    x = np.asarray(x, dtype=np.float64)
    k = gaussian_kernel(sigma)
    r = k.size // 2
    if r >= min(x.shape[-2:]):
        raise ConfigurationError(f"blur radius {r} too large for a {x.shape[-2:]} image")
    pad = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, pad + [(r, r), (0, 0)], mode="reflect")
    rows = sum(k[i] * xp[..., i : i + x.shape[-2], :] for i in range(k.size))
    xp = np.pad(rows, pad + [(0, 0), (r, r)], mode="reflect")
    return sum(k[i] * xp[..., :, i : i + x.shape[-1]] for i in range(k.size))


def keep_mask(shape_hw: tuple[int, int], p: float, seed: int) -> np.ndarray:
    """Binary per-pixel mask, 1 (keep original) with probability ``p``."""
    rng = np.random.default_rng(seed)
    return (rng.random(shape_hw) < p).astype(np.float64)


def degrade(x, dp: DegradationParams, mask: np.ndarray | None = None) -> np.ndarray:
    """``M * x + (1 - M) * blur(x)`` with one mask shared across channels."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"degrade expects a C x H x W frame, got {x.shape}")
    if mask is None:
        mask = keep_mask(x.shape[1:], dp.p, dp.mask_seed)
    elif mask.shape != x.shape[1:]:
        raise DimensionError(f"mask shape {mask.shape} != frame size {x.shape[1:]}")
    return mask * x + (1.0 - mask) * gaussian_blur(x, dp.blur_sigma)


def init_video_latents(x1, dp: DegradationParams, schedule: NoiseSchedule, l: int, seed: int) -> tuple[VideoLatent, int]:
    """Frame 1 is the clean reference; frames 2..l start at ``t0`` around the degraded reference.

    Returns the latent and the start step ``floor(t0 * T)``.
    """
    if l < 2:
        raise ConfigurationError(f"need at least 2 frames, got {l}")
    t0 = dp.start_step(schedule.T)
    if t0 == 0:
        raise ConfigurationError(f"t0={dp.t0} maps to step 0 for T={schedule.T}; nothing to denoise")
    x1 = np.asarray(getattr(x1, "data", x1), dtype=np.float64)
    base = schedule.alpha[t0] * degrade(x1, dp)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((l - 1,) + x1.shape)
    frames = np.concatenate([x1[None], base[None] + schedule.sigma[t0] * eps], axis=0)
    mask = np.ones(l, dtype=bool)
    mask[0] = False
    steps = np.full(l, t0, dtype=np.int64)
    steps[0] = 0
    return VideoLatent(frames, mask, steps), t0
