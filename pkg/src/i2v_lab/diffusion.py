"""Variance-preserving noise schedule, noising, loss, denoising steps and guidance.

All schedule quantities use the (alpha, sigma) convention with
``alpha[t]**2 + sigma[t]**2 == 1``.  Where a DDPM-style cumulative product is
needed it is ``alpha_bar[t] = alpha[t]**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, StepIndexError
from .numerics import Tensor, as_tensor, mul, sub

COSINE_OFFSET = 0.008
ALPHA_BAR_FLOOR = 1e-5
ALPHA_GUARD = 1e-6
UNCOND_TOKEN = 0


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray

    @property
    def alpha_bar(self) -> np.ndarray:
        return self.alpha**2

    def check(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise StepIndexError(f"step {t} outside [0, {self.T}]")
        return t


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 1.0
    uncond_token: int = UNCOND_TOKEN

    def __post_init__(self):
        if not self.w >= 0:
            raise ConfigurationError(f"guidance weight must be >= 0, got {self.w}")


def make_vp_schedule(T: int) -> NoiseSchedule:
    if int(T) < 1:
        raise ConfigurationError(f"schedule needs T >= 1, got {T}")
    T = int(T)
    s = COSINE_OFFSET
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    alpha_bar = np.clip(f / math.cos(s * math.pi / (2 * (1 + s))) ** 2, ALPHA_BAR_FLOOR, 1.0)
    alpha = np.sqrt(alpha_bar)
    alpha[0] = 1.0
    sigma = np.sqrt(1.0 - alpha**2)
    alpha.setflags(write=False)
    sigma.setflags(write=False)
    return NoiseSchedule(T, alpha, sigma)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """``alpha[t] * x0 + sigma[t] * eps``; works on arrays or Tensors."""
    _same_shape(x0, eps, "forward_diffuse")
    t = schedule.check(t)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return mul(x0, schedule.alpha[t]) + mul(eps, schedule.sigma[t])
    return schedule.alpha[t] * np.asarray(x0) + schedule.sigma[t] * np.asarray(eps)


def epsilon_loss(eps_pred, eps_true, frame_mask) -> Tensor:
    """Mean squared error over the frames selected by ``frame_mask``.

    The frame axis is the one four places from the end (``[l, C, H, W]`` or
    batched ``[B, l, C, H, W]``); lower-rank inputs use axis 0.
    """
    eps_pred = as_tensor(eps_pred)
    eps_true = as_tensor(eps_true)
    _same_shape(eps_pred, eps_true, "epsilon_loss")
    mask = np.asarray(frame_mask, dtype=bool)
    axis = eps_pred.ndim - 4 if eps_pred.ndim >= 4 else 0
    if mask.ndim != 1 or mask.shape[0] != eps_pred.shape[axis]:
        raise DimensionError(f"frame mask of length {mask.shape} does not match frame axis of {eps_pred.shape}")
    if not mask.any():
        raise ConfigurationError("every frame is masked out of the loss")
    shape = [1] * eps_pred.ndim
    shape[axis] = mask.shape[0]
    weights = mask.astype(np.float64).reshape(shape)
    diff = sub(eps_pred, eps_true)
    count = int(mask.sum()) * (eps_pred.size // mask.shape[0])
    sq = mul(mul(diff, diff), weights)
    return mul(sq.sum(), 1.0 / count)


def predict_x0(x_t, eps_pred, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a = schedule.alpha[t]
    if a < ALPHA_GUARD:
        raise NumericError(f"alpha[{t}] = {a:.3g} below guard {ALPHA_GUARD}")
    return (x_t - schedule.sigma[t] * eps_pred) / a


def denoising_step(
    x_t,
    eps_pred,
    t: int,
    schedule: NoiseSchedule,
    mode: str = "deterministic",
    noise=None,
    t_prev: int | None = None,
    x0_range: tuple[float, float] | None = None,
) -> np.ndarray:
    """Move from step ``t`` to ``t_prev`` (default ``t - 1``).

    ``deterministic`` is the DDIM update; ``ancestral`` adds fresh noise with
    ``eta = sigma[t_prev] * sqrt(1 - alpha_bar[t] / alpha_bar[t_prev])``.
    ``x0_range`` clamps the reconstructed clean sample before re-noising;
    the noise direction is then re-derived from the clamped value so the
    step stays on the VP manifold.
    """
    x_t = np.asarray(getattr(x_t, "data", x_t), dtype=np.float64)
    eps_pred = np.asarray(getattr(eps_pred, "data", eps_pred), dtype=np.float64)
    _same_shape(x_t, eps_pred, "denoising_step")
    t = int(t)
    if t < 1 or t > schedule.T:
        raise StepIndexError(f"denoising step needs 1 <= t <= {schedule.T}, got {t}")
    t_prev = t - 1 if t_prev is None else int(t_prev)
    if not 0 <= t_prev < t:
        raise StepIndexError(f"target step {t_prev} must lie in [0, {t})")
    x0_hat = predict_x0(x_t, eps_pred, t, schedule)
    if x0_range is not None:
        x0_hat = np.clip(x0_hat, *x0_range)
        eps_pred = (x_t - schedule.alpha[t] * x0_hat) / schedule.sigma[t]
    a_prev, s_prev = schedule.alpha[t_prev], schedule.sigma[t_prev]
    if mode == "deterministic":
        if noise is not None:
            raise ConfigurationError("deterministic step takes no noise")
        return a_prev * x0_hat + s_prev * eps_pred
    if mode == "ancestral":
        if noise is None:
            raise ConfigurationError("ancestral step requires noise")
        noise = np.asarray(getattr(noise, "data", noise), dtype=np.float64)
        _same_shape(x_t, noise, "denoising_step noise")
        ab = schedule.alpha_bar
        eta = s_prev * math.sqrt(max(0.0, 1.0 - ab[t] / ab[t_prev]))
        direction = math.sqrt(max(0.0, s_prev**2 - eta**2))
        return a_prev * x0_hat + direction * eps_pred + eta * noise
    raise ConfigurationError(f"unknown sampler mode {mode!r}")


def cfg_combine(eps_cond, eps_uncond, w: float):
    _same_shape(eps_cond, eps_uncond, "cfg_combine")
    if isinstance(eps_cond, Tensor) or isinstance(eps_uncond, Tensor):
        return mul(eps_cond, w) + mul(eps_uncond, 1.0 - w)
    return w * np.asarray(eps_cond) + (1.0 - w) * np.asarray(eps_uncond)


def sampling_timesteps(start: int, steps: int) -> list[int]:
    """Uniform-stride descending step indices from ``start`` to 0 inclusive."""
    if start < 1:
        raise ConfigurationError(f"sampling must start at a step >= 1, got {start}")
    steps = max(1, min(int(steps), start))
    grid = np.round(np.linspace(start, 0, steps + 1)).astype(int)
    out = [int(grid[0])]
    for v in grid[1:]:
        if v < out[-1]:
            out.append(int(v))
    return out
