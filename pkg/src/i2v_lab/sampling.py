"""First-frame-conditioned sampling loop with guidance and the similarity prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, cfg_combine, denoising_step, sampling_timesteps
from .errors import ConfigurationError, NumericError
from .numerics import Tensor, no_grad
from .similarity_prior import DegradationParams, init_video_latents
from .video_model import ConditionEmbedding, VideoUNet, predict_epsilon


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    mode: str = "deterministic"
    guidance: float = 1.0
    use_prior: bool = True
    clip_x0: bool = True  # clamp predicted clean frames to the data range [-1, 1]

    def __post_init__(self):
        if self.mode not in ("deterministic", "ancestral"):
            raise ConfigurationError(f"sampler mode must be deterministic or ancestral, got {self.mode!r}")
        if self.steps < 1:
            raise ConfigurationError(f"sampler steps must be >= 1, got {self.steps}")
        if not self.guidance >= 0:
            raise ConfigurationError(f"guidance weight must be >= 0, got {self.guidance}")


def _tokens(cond):
    if isinstance(cond, ConditionEmbedding):
        cond = cond.tokens()
    return Tensor(cond.data) if isinstance(cond, Tensor) else Tensor(cond)


def sample_i2v(
    model: VideoUNet,
    reference: np.ndarray,
    cond,
    uncond,
    schedule: NoiseSchedule,
    frames: int,
    dp: DegradationParams,
    sampler: SamplerConfig = SamplerConfig(),
    seed: int = 0,
) -> np.ndarray:
    """Generate ``[frames, C, H, W]`` in model space with frame 1 fixed to ``reference``.

    The number of denoising steps is ``sampler.steps`` scaled by the fraction
    of the schedule that remains below the start step, so the stride matches
    a full-length run.  ``guidance == 1`` needs no unconditional pass since
    the combination reduces to the conditional prediction.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if sampler.use_prior:
        latent, start = init_video_latents(reference, dp, schedule, frames, seed)
        x = latent.data.copy()
    else:
        start = schedule.T
        rng = np.random.default_rng(seed)
        x = np.concatenate([reference[None], rng.standard_normal((frames - 1,) + reference.shape)], axis=0)
    n_steps = max(1, round(sampler.steps * start / schedule.T))
    ts = sampling_timesteps(start, n_steps)
    cond_t, uncond_t = _tokens(cond), _tokens(uncond) if uncond is not None else None
    noise_rng = np.random.default_rng([seed, 1])
    with no_grad():
        for t, t_prev in zip(ts[:-1], ts[1:]):
            steps = np.full(frames, t, dtype=np.int64)
            steps[0] = 0
            eps = predict_epsilon(x, steps, cond_t, model).data
            if sampler.guidance != 1.0:
                if uncond_t is None:
                    raise ConfigurationError("guidance != 1 needs an unconditional embedding")
                eps = cfg_combine(eps, predict_epsilon(x, steps, uncond_t, model).data, sampler.guidance)
            noise = noise_rng.standard_normal(x[1:].shape) if sampler.mode == "ancestral" else None
            x[1:] = denoising_step(x[1:], eps[1:], t, schedule, sampler.mode, noise, t_prev=t_prev, x0_range=(-1.0, 1.0) if sampler.clip_x0 else None)
            if not np.isfinite(x).all():
                raise NumericError(f"non-finite sample at step {t}")
    return x
