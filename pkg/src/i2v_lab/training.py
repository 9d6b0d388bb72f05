"""Synthetic moving-shape clips, AdamW, and the two training stages.

Stage one trains the whole text-to-video model (spatial, temporal, content
encoder).  Stage two freezes all of it, attaches zero-initialized adapters
and updates only their query/output projections on first-frame-conditioned
batches.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, epsilon_loss, forward_diffuse, make_vp_schedule
from .errors import ConfigurationError, FreezeViolation, StructuralError, TrainingError
from .numerics import Tensor, no_grad
from .video_model import (
    VOCAB,
    VideoUNet,
    assemble_i2v_input,
    make_condition,
    null_condition,
    partition_parameters,
    predict_epsilon,
)

logger = logging.getLogger(__name__)

SHAPES = ("square", "circle", "triangle")
COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}
DIRECTIONS = {
    "right": (1, 0), "up-right": (1, -1), "up": (0, -1), "up-left": (-1, -1),
    "left": (-1, 0), "down-left": (-1, 1), "down": (0, 1), "down-right": (1, 1),
}
SPEEDS = (1, 2)
BACKGROUND = 0.5
SUPERSAMPLE = 4


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------
@dataclass
class SyntheticClip:
    frames: np.ndarray  # [l, 3, H, W] in [0, 1]
    caption: tuple[int, int, int]
    velocity: tuple[int, int]
    seed: int

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(VOCAB[i] for i in self.caption)


def _coverage(shape: str, cx: float, cy: float, size: float, h: int, w: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape, on a torus."""
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    dy = (ys - cy + h / 2) % h - h / 2
    dx = (xs - cx + w / 2) % w - w / 2
    DY, DX = np.meshgrid(dy, dx, indexing="ij")
    half = size / 2
    if shape == "square":
        inside = (np.abs(DX) <= half) & (np.abs(DY) <= half)
    elif shape == "circle":
        inside = DX**2 + DY**2 <= half**2
    elif shape == "triangle":
        # apex up, base down; inside when below both slanted edges and above the base
        inside = (DY <= half) & (2 * np.abs(DX) - half <= DY)
    else:
        raise ConfigurationError(f"unknown shape {shape!r}")
    return inside.reshape(h, SUPERSAMPLE, w, SUPERSAMPLE).mean(axis=(1, 3))


def render_clip(shape, color, direction, speed, center, l, h, w, size=10.0) -> np.ndarray:
    cov = _coverage(shape, center[0], center[1], size, h, w)
    rgb = np.asarray(COLORS[color])[:, None, None]
    first = BACKGROUND * (1.0 - cov)[None] + rgb * cov[None]
    dx, dy = DIRECTIONS[direction]
    return np.stack([np.roll(first, (k * speed * dy, k * speed * dx), axis=(1, 2)) for k in range(l)])


def generate_dataset(n_clips: int, l: int = 8, h: int = 32, w: int = 32, seed: int = 0, size: float = 10.0) -> list[SyntheticClip]:
    """Deterministic set of anti-aliased shapes moving at constant integer velocity."""
    if min(n_clips, l, h, w) <= 0:
        raise ConfigurationError(f"dataset extents must be positive: n={n_clips}, l={l}, h={h}, w={w}")
    if not 0 < size <= min(h, w):
        raise ConfigurationError(f"shape size {size} does not fit a {h}x{w} canvas")
    clip_seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n_clips)
    clips = []
    for cs in clip_seeds:
        rng = np.random.default_rng(int(cs))
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = list(COLORS)[rng.integers(len(COLORS))]
        direction = list(DIRECTIONS)[rng.integers(len(DIRECTIONS))]
        speed = SPEEDS[rng.integers(len(SPEEDS))]
        center = (rng.uniform(0, w), rng.uniform(0, h))
        frames = render_clip(shape, color, direction, speed, center, l, h, w, size)
        dx, dy = DIRECTIONS[direction]
        caption = (VOCAB.index(shape), VOCAB.index(color), VOCAB.index(direction))
        clips.append(SyntheticClip(frames, caption, (dx * speed, dy * speed), int(cs)))
    return clips


def to_model_space(frames01) -> np.ndarray:
    return 2.0 * np.asarray(frames01, dtype=np.float64) - 1.0


def from_model_space(x) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


_CACHE_MAGIC = b"I2VDSET\x00"
_CACHE_VERSION = 1


def write_dataset_cache(path, clips: list[SyntheticClip]) -> None:
    """Header ``magic, version, n, l, C, H, W`` then per clip
    ``seed:int64, caption:3*uint16, velocity:2*int32, frames:float64[l*C*H*W]`` (little endian)."""
    if not clips:
        raise ConfigurationError("refusing to write an empty dataset cache")
    l, c, h, w = clips[0].frames.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IIIIII", _CACHE_VERSION, len(clips), l, c, h, w))
        for clip in clips:
            fh.write(struct.pack("<q3H2i", clip.seed, *clip.caption, *clip.velocity))
            fh.write(np.ascontiguousarray(clip.frames, dtype="<f8").tobytes())


def read_dataset_cache(path) -> list[SyntheticClip]:
    with open(path, "rb") as fh:
        if fh.read(8) != _CACHE_MAGIC:
            raise StructuralError(f"{path}: not a dataset cache")
        version, n, l, c, h, w = struct.unpack("<IIIIII", fh.read(24))
        if version != _CACHE_VERSION:
            raise StructuralError(f"{path}: unsupported cache version {version}")
        rec = struct.calcsize("<q3H2i")
        clips = []
        for _ in range(n):
            seed, a, b, d, vx, vy = struct.unpack("<q3H2i", fh.read(rec))
            frames = np.frombuffer(fh.read(8 * l * c * h * w), dtype="<f8").reshape(l, c, h, w).astype(np.float64)
            clips.append(SyntheticClip(frames, (a, b, d), (vx, vy), seed))
    return clips


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay, applied only to the parameters it owns."""

    def __init__(self, params: dict[str, Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p.data -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 1
    cond_dropout: float = 0.1
    content_dropout: float = 0.5
    log_every: int = 100


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    frozen_grad_norms: list[float] = field(default_factory=list)
    dropped: list[bool] = field(default_factory=list)


def condition_dropout_draws(rng: np.random.Generator, rate: float, n: int) -> np.ndarray:
    """``n`` Bernoulli(rate) decisions; True means the condition is replaced by the null prompt."""
    return rng.random(n) < rate


def _batch(dataset, rng, batch_size):
    idx = rng.integers(len(dataset), size=batch_size)
    x0 = np.stack([to_model_space(dataset[i].frames) for i in idx])
    caps = np.array([dataset[i].caption for i in idx], dtype=np.int64)
    return x0, caps


def _check_loss(loss: Tensor, step: int) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError("loss is not finite", step)
    return value


def train_base_stage(model: VideoUNet, dataset, steps: int, seed: int, schedule: NoiseSchedule | None = None, cfg: TrainConfig | None = None) -> TrainHistory:
    """Plain text-to-video training: every frame noised, loss on every frame."""
    cfg = cfg or TrainConfig(steps=steps, lr=5e-4, weight_decay=0.0)
    schedule = schedule or make_vp_schedule(1000)
    if model.adapters:
        raise ConfigurationError("detach adapters before base training")
    model.set_base_trainable(True)
    opt = AdamW(model.params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(seed)
    hist = TrainHistory()
    for step in range(steps):
        x0, caps = _batch(dataset, rng, cfg.batch_size)
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(x0.shape)
        drop = bool(condition_dropout_draws(rng, cfg.cond_dropout, 1)[0])
        use_image = not condition_dropout_draws(rng, cfg.content_dropout, 1)[0]
        xt = forward_diffuse(x0, t, eps, schedule)
        if drop:
            cond = null_condition(model, batch=len(caps))
        else:
            cond = make_condition(model, caps, x0[:, 0] if use_image else None)
        opt.zero_grad()
        loss = epsilon_loss(predict_epsilon(xt, t, cond, model), eps, np.ones(x0.shape[1], dtype=bool))
        hist.losses.append(_check_loss(loss, step))
        hist.dropped.append(drop)
        loss.backward()
        opt.step()
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.info("base step %d loss %.4f", step + 1, np.mean(hist.losses[-cfg.log_every :]))
    model.set_base_trainable(False)
    return hist


def i2v_batch(model: VideoUNet, dataset, rng: np.random.Generator, schedule: NoiseSchedule, batch_size: int = 1, cond_dropout: float = 0.1):
    """One first-frame-conditioned batch: ``(x_in, steps, cond_tokens, eps_target, frame_mask)``."""
    x0, caps = _batch(dataset, rng, batch_size)
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(x0.shape)
    eps[:, 0] = 0.0
    drop = bool(condition_dropout_draws(rng, cond_dropout, 1)[0])
    xs, steps = [], []
    for b in range(x0.shape[0]):
        noised = forward_diffuse(x0[b, 1:], t, eps[b, 1:], schedule)
        latent = assemble_i2v_input(x0[b, 0], list(noised), t)
        xs.append(latent.data)
        steps.append(latent.steps)
        mask = latent.frame_mask
    with no_grad():
        if drop:
            cond = null_condition(model, batch=len(caps)).tokens()
        else:
            cond = make_condition(model, caps, x0[:, 0]).tokens()
    return np.stack(xs), np.stack(steps), Tensor(cond.data), eps, mask


def i2v_loss(model: VideoUNet, batch) -> Tensor:
    x, steps, cond, eps, mask = batch
    return epsilon_loss(predict_epsilon(x, steps, cond, model), eps, mask)


def frozen_grad_norm(model: VideoUNet) -> float:
    total = 0.0
    for p in model.params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def train_i2v_stage(model: VideoUNet, dataset, steps: int, seed: int, schedule: NoiseSchedule | None = None, cfg: TrainConfig | None = None) -> TrainHistory:
    """Adapter-only training with frame 1 clean and excluded from the loss."""
    cfg = cfg or TrainConfig(steps=steps)
    schedule = schedule or make_vp_schedule(1000)
    model.set_base_trainable(False)
    if not model.adapters:
        model.attach_adapters()
    trainable = model.adapter_tensors()
    opt = AdamW(trainable, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(seed)
    hist = TrainHistory()
    for step in range(steps):
        batch = i2v_batch(model, dataset, rng, schedule, cfg.batch_size, cfg.cond_dropout)
        opt.zero_grad()
        loss = i2v_loss(model, batch)
        hist.losses.append(_check_loss(loss, step))
        loss.backward()
        norm = frozen_grad_norm(model)
        hist.frozen_grad_norms.append(norm)
        leaked = [k for k, p in model.params.items() if p.grad is not None]
        if leaked:
            raise FreezeViolation(f"step {step}: gradient reached frozen parameter {leaked[0]}")
        opt.step()
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.info("i2v step %d loss %.4f", step + 1, np.mean(hist.losses[-cfg.log_every :]))
    return hist


def fixed_i2v_batches(model: VideoUNet, dataset, n: int, seed: int, schedule: NoiseSchedule | None = None):
    """Reusable evaluation batches (no condition dropout)."""
    schedule = schedule or make_vp_schedule(1000)
    rng = np.random.default_rng(seed)
    return [i2v_batch(model, dataset, rng, schedule, 1, 0.0) for _ in range(n)]


def mean_i2v_loss(model: VideoUNet, batches) -> float:
    with no_grad():
        return float(np.mean([float(i2v_loss(model, b).data) for b in batches]))


# ---------------------------------------------------------------------------
# freeze verification
# ---------------------------------------------------------------------------
def snapshot(model: VideoUNet) -> dict[str, bytes]:
    """Bitwise copy of the frozen partition."""
    part, _ = partition_parameters(model)
    return {k: t.data.tobytes() for k, t in part.frozen.items()}


def verify_freeze(snapshot_a: dict[str, bytes], snapshot_b: dict[str, bytes]) -> tuple[bool, str | None]:
    if snapshot_a.keys() != snapshot_b.keys():
        missing = sorted(set(snapshot_a) ^ set(snapshot_b))
        raise StructuralError(f"snapshots cover different parameters: {missing[:3]}")
    for name in snapshot_a:
        if snapshot_a[name] != snapshot_b[name]:
            return False, name
    return True, None
