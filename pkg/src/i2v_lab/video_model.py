"""Toy video U-Net with first-frame conditioning and cross-frame adapters.

Layout: ``conv_in -> down1 (32x32) -> down2 (16x16, attention) -> mid (8x8,
attention) -> up2 (16x16, attention) -> up1 (32x32) -> conv_out``.  Every
attention-hosting block carries spatial self-attention (optionally fused with
an adapter branch), text/image cross-attention, and a frame-axis temporal
attention layer.  All frames of a clip share the spatial weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (
    AdapterParams,
    CrossAttentionParams,
    SelfAttentionParams,
    TemporalAttentionParams,
    cross_attention,
    frame_self_attention,
    init_adapter,
    sinusoidal_table,
    temporal_attention,
)
from .errors import ConfigurationError, DimensionError
from .numerics import Tensor, add, as_tensor, concat, conv2d, group_norm, matmul, mul, silu, sum_, transpose

HOSTS = ("down2", "mid", "up2")
VOCAB = (
    "<null>",
    "square", "circle", "triangle",
    "red", "green", "blue",
    "right", "up-right", "up", "up-left", "left", "down-left", "down", "down-right",
)
TIME_FEATURES = 32
TIME_DIM = 64


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 32
    in_channels: int = 3
    channels: tuple[int, int] = (32, 64)
    d: int = 64
    d_cond: int = 32
    max_frames: int = 16
    groups: int = 4
    image_tokens: int = 4
    vocab_size: int = len(VOCAB)
    adapter_layers: tuple[str, ...] = HOSTS

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "adapter_layers", tuple(self.adapter_layers))
        values = [self.resolution, self.in_channels, self.d, self.d_cond, self.max_frames, self.groups, self.image_tokens, self.vocab_size, *self.channels]
        if any(int(v) <= 0 for v in values):
            raise ConfigurationError(f"model extents must be positive: {self}")
        if len(self.channels) != 2:
            raise ConfigurationError(f"two stage widths expected, got {self.channels}")
        if self.d != self.channels[1]:
            raise ConfigurationError(f"attention width d={self.d} must equal the attention stage width {self.channels[1]}")
        if self.d % self.groups or any(c % self.groups for c in self.channels):
            raise ConfigurationError(f"widths {self.channels} / d={self.d} not divisible by {self.groups} groups")
        if self.resolution % 8:
            raise ConfigurationError(f"resolution {self.resolution} must be a multiple of 8")
        grid = math.isqrt(self.image_tokens)
        if grid * grid != self.image_tokens or (self.resolution // 8) % grid:
            raise ConfigurationError(f"image_tokens={self.image_tokens} must be a square grid dividing {self.resolution // 8}")
        unknown = set(self.adapter_layers) - set(HOSTS)
        if unknown:
            raise ConfigurationError(f"unknown adapter layers {sorted(unknown)}; hosts are {HOSTS}")


@dataclass
class VideoLatent:
    """Frames ``[l, C, H, W]`` (or ``[B, l, C, H, W]``) with the loss frame mask."""

    data: np.ndarray
    frame_mask: np.ndarray
    steps: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return self.data.shape[-4]


@dataclass
class ConditionEmbedding:
    text_tokens: Tensor
    image_tokens: Tensor | None = None

    def tokens(self) -> Tensor:
        if self.image_tokens is None:
            return self.text_tokens
        return concat([self.text_tokens, self.image_tokens], axis=-2)


@dataclass
class ParameterPartition:
    frozen: dict[str, Tensor]
    trainable: dict[str, Tensor]

    @property
    def frozen_count(self) -> int:
        return sum(t.size for t in self.frozen.values())

    @property
    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainable.values())

    @property
    def fraction(self) -> float:
        total = self.frozen_count + self.trainable_count
        return self.trainable_count / total if total else 0.0

    def counts(self) -> dict:
        return {"frozen": self.frozen_count, "trainable": self.trainable_count, "fraction": self.fraction}


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------
def _conv_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    c1, c2 = cfg.channels
    shapes: dict[str, tuple] = {
        "time.lin1.w": (TIME_FEATURES, TIME_DIM), "time.lin1.b": (TIME_DIM,),
        "time.lin2.w": (TIME_DIM, TIME_DIM), "time.lin2.b": (TIME_DIM,),
        "text.embed": (cfg.vocab_size, cfg.d_cond),
        "enc.conv1": (16, cfg.in_channels, 3, 3),
        "enc.conv2": (32, 16, 3, 3),
        "enc.conv3": (cfg.d_cond, 32, 3, 3),
        "conv_in.w": (c1, cfg.in_channels, 3, 3), "conv_in.b": (c1,),
    }
    for name, cin, cout in (("down1", c1, c1), ("down2", c2, c2), ("mid", c2, c2), ("up2", 2 * c2, c2), ("up1", 2 * c1, c1)):
        shapes.update(_res_shapes(name, cin, cout))
    shapes.update({
        "down1.down.w": (c2, c1, 3, 3), "down1.down.b": (c2,),
        "down2.down.w": (c2, c2, 3, 3), "down2.down.b": (c2,),
        "up1.upconv.w": (c1, c2, 3, 3), "up1.upconv.b": (c1,),
        "out.norm.w": (c1,), "out.norm.b": (c1,),
        "conv_out.w": (cfg.in_channels, c1, 3, 3), "conv_out.b": (cfg.in_channels,),
    })
    d, dc = cfg.d, cfg.d_cond
    for host in HOSTS:
        for norm in ("sa_norm", "ca_norm", "tm_norm"):
            shapes[f"{host}.{norm}.w"] = (d,)
            shapes[f"{host}.{norm}.b"] = (d,)
        for w in ("W_Q", "W_K", "W_V", "W_O"):
            shapes[f"{host}.sa.{w}"] = (d, d)
            shapes[f"{host}.tm.{w}"] = (d, d)
        shapes[f"{host}.ca.Wc_Q"] = (d, d)
        shapes[f"{host}.ca.Wc_K"] = (dc, d)
        shapes[f"{host}.ca.Wc_V"] = (dc, d)
    return shapes


def _res_shapes(name, cin, cout):
    shapes = {
        f"{name}.norm1.w": (cin,), f"{name}.norm1.b": (cin,),
        f"{name}.conv1.w": (cout, cin, 3, 3), f"{name}.conv1.b": (cout,),
        f"{name}.temb.w": (TIME_DIM, cout), f"{name}.temb.b": (cout,),
        f"{name}.norm2.w": (cout,), f"{name}.norm2.b": (cout,),
        f"{name}.conv2.w": (cout, cout, 3, 3), f"{name}.conv2.b": (cout,),
    }
    if cin != cout:
        shapes[f"{name}.skip.w"] = (cout, cin, 1, 1)
        shapes[f"{name}.skip.b"] = (cout,)
    return shapes


def _init_value(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    parts = name.split(".")
    leaf = parts[-1]
    if leaf == "w" and any(p.startswith("norm") or p.endswith("_norm") for p in parts):
        return np.ones(shape)
    if leaf == "b" or name.startswith("conv_out") or name.endswith(".tm.W_O") or name.endswith(".conv2.w"):
        return np.zeros(shape)
    if name == "text.embed":
        return rng.standard_normal(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    return rng.standard_normal(shape) / math.sqrt(fan_in)


class VideoUNet:
    """Parameter container plus forward pass.

    ``params`` holds the base (spatial + temporal + content encoder) weights;
    ``adapters`` maps host names to :class:`AdapterParams` and is empty for
    the plain text-to-video model.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in _conv_shapes(self.config).items():
            self.params[name] = Tensor(_init_value(name, shape, rng), name=name)
        self.adapters: dict[str, AdapterParams] = {}
        self.positional = sinusoidal_table(self.config.max_frames, self.config.d)

    # -- parameter views ------------------------------------------------------
    def self_attn(self, host: str) -> SelfAttentionParams:
        p = self.params
        return SelfAttentionParams(p[f"{host}.sa.W_Q"], p[f"{host}.sa.W_K"], p[f"{host}.sa.W_V"], p[f"{host}.sa.W_O"])

    def cross_attn(self, host: str) -> CrossAttentionParams:
        p = self.params
        return CrossAttentionParams(p[f"{host}.ca.Wc_Q"], p[f"{host}.ca.Wc_K"], p[f"{host}.ca.Wc_V"])

    def temporal(self, host: str) -> TemporalAttentionParams:
        p = self.params
        return TemporalAttentionParams(p[f"{host}.tm.W_Q"], p[f"{host}.tm.W_K"], p[f"{host}.tm.W_V"], p[f"{host}.tm.W_O"], self.positional)

    def attach_adapters(self) -> dict[str, AdapterParams]:
        """Fresh adapters on every configured host (query copied, output zeroed)."""
        self.adapters = {h: init_adapter(self.self_attn(h)) for h in self.config.adapter_layers}
        return self.adapters

    def detach_adapters(self) -> dict[str, AdapterParams]:
        adapters, self.adapters = self.adapters, {}
        return adapters

    def adapter_tensors(self) -> dict[str, Tensor]:
        out = {}
        for host, ad in self.adapters.items():
            for key, t in ad.tensors().items():
                out[f"adapter.{host}.{key}"] = t
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.params, **self.adapter_tensors()}

    def set_base_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None

    def clone(self) -> "VideoUNet":
        other = VideoUNet.__new__(VideoUNet)
        other.config = self.config
        other.positional = self.positional.copy()
        other.params = {k: Tensor(v.data.copy(), v.requires_grad, k) for k, v in self.params.items()}
        other.adapters = {
            h: AdapterParams(Tensor(a.Wp_Q.data.copy(), True), Tensor(a.Wp_O.data.copy(), True)) for h, a in self.adapters.items()
        }
        return other

    def without_adapters(self) -> "VideoUNet":
        """View sharing the base weights but with no adapter branches."""
        other = VideoUNet.__new__(VideoUNet)
        other.config = self.config
        other.positional = self.positional
        other.params = self.params
        other.adapters = {}
        return other

    # -- forward ----------------------------------------------------------------
    def __call__(self, x, t, cond) -> Tensor:
        return predict_epsilon(x, t, cond, self)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
def timestep_features(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = TIME_FEATURES // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)[None, :]
    angle = t * freqs
    return np.concatenate([np.sin(angle), np.cos(angle)], axis=1)


def _frame_steps(t, b, f) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 0:
        return np.full((b, f), float(arr))
    if arr.ndim == 1 and arr.shape[0] == f:
        return np.broadcast_to(arr[None, :], (b, f))
    if arr.shape == (b, f):
        return arr
    raise DimensionError(f"timestep shape {arr.shape} does not match {b} clip(s) of {f} frames")


def _linear(x, P, name):
    return add(matmul(x, P[f"{name}.w"]), P[f"{name}.b"])


def _conv(x, P, name, stride=1):
    w = P[f"{name}.w"]
    out = conv2d(x, w, stride=stride)
    return add(out, P[f"{name}.b"].reshape(1, -1, 1, 1))


def _norm(x, P, name, groups):
    return group_norm(x, groups, P[f"{name}.w"], P[f"{name}.b"])


def _res_block(x, temb, P, name, groups):
    h = _conv(silu(_norm(x, P, f"{name}.norm1", groups)), P, f"{name}.conv1")
    tproj = _linear(silu(temb), P, f"{name}.temb")
    h = add(h, tproj.reshape(tproj.shape + (1, 1)))
    h = _conv(silu(_norm(h, P, f"{name}.norm2", groups)), P, f"{name}.conv2")
    skip = _conv(x, P, f"{name}.skip") if f"{name}.skip.w" in P else x
    return add(skip, h)


def _to_tokens(x, b, f):
    # [B*F, C, H, W] -> [B, F, H*W, C]
    n, c, h, w = x.shape
    return transpose(x.reshape(b, f, c, h * w), (0, 1, 3, 2))


def _from_tokens(tok, hw):
    b, f, n, c = tok.shape
    return transpose(tok, (0, 1, 3, 2)).reshape(b * f, c, hw[0], hw[1])


def _attention_block(x, cond, model: VideoUNet, host, b, f, use_positional=True):
    P, g = model.params, model.config.groups
    hw = x.shape[2:]
    h = _to_tokens(_norm(x, P, f"{host}.sa_norm", g), b, f)
    x = add(x, _from_tokens(frame_self_attention(h, model.self_attn(host), model.adapters.get(host)), hw))
    h = _to_tokens(_norm(x, P, f"{host}.ca_norm", g), b, f)
    x = add(x, _from_tokens(cross_attention(h, cond, model.cross_attn(host)), hw))
    h = _to_tokens(_norm(x, P, f"{host}.tm_norm", g), b, f)
    out = temporal_attention(_to_tokens(x, b, f), model.temporal(host), h=h, positional=use_positional)
    return _from_tokens(out, hw)


def _upsample(x):
    n, c, h, w = x.shape
    ones = np.ones((1, 1, 1, 2, 1, 2))
    return mul(x.reshape(n, c, h, 1, w, 1), ones).reshape(n, c, 2 * h, 2 * w)


def predict_epsilon(x, t, cond, model: VideoUNet, use_positional: bool = True) -> Tensor:
    """Noise prediction for a clip ``[l, C, H, W]`` or clip batch ``[B, l, C, H, W]``.

    ``t`` is a scalar step, or per-frame steps of shape ``[l]`` / ``[B, l]``.
    ``cond`` is a token tensor ``[tokens, d_cond]`` / ``[B, tokens, d_cond]``
    or a :class:`ConditionEmbedding`.
    """
    cfg = model.config
    x = as_tensor(getattr(x, "data", x) if isinstance(x, VideoLatent) else x)
    single = x.ndim == 4
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 5:
        raise DimensionError(f"video must be [l, C, H, W] or [B, l, C, H, W], got {x.shape}")
    b, f, c, hh, ww = x.shape
    if c != cfg.in_channels or hh != cfg.resolution or ww != cfg.resolution:
        raise DimensionError(f"video frames {x.shape[2:]} do not match model ({cfg.in_channels}, {cfg.resolution}, {cfg.resolution})")
    if f > cfg.max_frames:
        raise ConfigurationError(f"{f} frames exceed max_frames={cfg.max_frames}")
    if isinstance(cond, ConditionEmbedding):
        cond = cond.tokens()
    cond = as_tensor(cond)
    if cond.shape[-1] != cfg.d_cond:
        raise DimensionError(f"condition width {cond.shape[-1]} != d_cond {cfg.d_cond}")
    if single and cond.ndim == 2:
        cond = cond.reshape((1,) + cond.shape)
    if cond.ndim != 3 or cond.shape[0] != b:
        raise DimensionError(f"condition shape {cond.shape} does not match {b} clip(s)")

    steps = _frame_steps(t, b, f)
    P, g = model.params, cfg.groups
    temb = _linear(silu(_linear(Tensor(timestep_features(steps)), P, "time.lin1")), P, "time.lin2")

    h = _conv(x.reshape(b * f, c, hh, ww), P, "conv_in")
    s1 = _res_block(h, temb, P, "down1", g)
    h = _conv(s1, P, "down1.down", stride=2)
    h = _res_block(h, temb, P, "down2", g)
    s2 = _attention_block(h, cond, model, "down2", b, f, use_positional)
    h = _conv(s2, P, "down2.down", stride=2)
    h = _res_block(h, temb, P, "mid", g)
    h = _attention_block(h, cond, model, "mid", b, f, use_positional)
    h = _res_block(concat([_upsample(h), s2], axis=1), temb, P, "up2", g)
    h = _attention_block(h, cond, model, "up2", b, f, use_positional)
    h = _conv(_upsample(h), P, "up1.upconv")
    h = _res_block(concat([h, s1], axis=1), temb, P, "up1", g)
    h = _conv(silu(_norm(h, P, "out.norm", g)), P, "conv_out")
    out = h.reshape(b, f, c, hh, ww)
    return out.reshape(f, c, hh, ww) if single else out


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------
def encode_image_condition(image, model: VideoUNet) -> Tensor:
    """Content-encoder tokens ``[tokens_i, d_cond]`` (or ``[B, tokens_i, d_cond]``).

    Three bias-free stride-2 convolutions followed by average pooling onto a
    square grid of ``tokens_i`` cells.
    """
    cfg = model.config
    x = as_tensor(image)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.resolution, cfg.resolution):
        raise DimensionError(f"image shape {tuple(image.shape)} does not match ({cfg.in_channels}, {cfg.resolution}, {cfg.resolution})")
    P = model.params
    h = silu(conv2d(x, P["enc.conv1"], stride=2))
    h = silu(conv2d(h, P["enc.conv2"], stride=2))
    h = conv2d(h, P["enc.conv3"], stride=2)
    b, dc, r, _ = h.shape
    grid = math.isqrt(cfg.image_tokens)
    cell = r // grid
    pooled = mul(sum_(h.reshape(b, dc, grid, cell, grid, cell), axis=(3, 5)), 1.0 / (cell * cell))
    tokens = transpose(pooled.reshape(b, dc, grid * grid), (0, 2, 1))
    return tokens.reshape(tokens.shape[1:]) if single else tokens


def embed_text(token_ids, model: VideoUNet) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= model.config.vocab_size:
        raise DimensionError(f"token ids {ids.tolist()} outside vocabulary of {model.config.vocab_size}")
    onehot = np.eye(model.config.vocab_size)[ids]
    return matmul(Tensor(onehot), model.params["text.embed"])


def make_condition(model: VideoUNet, token_ids, image=None) -> ConditionEmbedding:
    """Text tokens plus, when ``image`` is given, content-encoder tokens."""
    text = embed_text(token_ids, model)
    img = encode_image_condition(image, model) if image is not None else None
    return ConditionEmbedding(text, img)


def null_condition(model: VideoUNet, batch: int | None = None, n_tokens: int = 3) -> ConditionEmbedding:
    shape = (n_tokens,) if batch is None else (batch, n_tokens)
    return make_condition(model, np.zeros(shape, dtype=np.int64))


def caption_ids(words) -> list[int]:
    return [VOCAB.index(w) for w in words]


# ---------------------------------------------------------------------------
# first-frame conditioning and accounting
# ---------------------------------------------------------------------------
def assemble_i2v_input(clean_first, noised_rest, t: int) -> VideoLatent:
    """Clean frame 1 followed by the noised frames; frame 1 is excluded from the loss.

    Per-frame steps record ``0`` for the clean frame and ``t`` for the rest.
    """
    first = np.asarray(getattr(clean_first, "data", clean_first), dtype=np.float64)
    rest = [np.asarray(getattr(r, "data", r), dtype=np.float64) for r in noised_rest]
    if len(rest) < 1:
        raise ConfigurationError("first-frame conditioning needs at least 2 frames")
    for r in rest:
        if r.shape != first.shape:
            raise DimensionError(f"frame shape {r.shape} != first frame shape {first.shape}")
    data = np.stack([first] + rest, axis=0)
    mask = np.ones(len(rest) + 1, dtype=bool)
    mask[0] = False
    steps = np.full(len(rest) + 1, int(t), dtype=np.int64)
    steps[0] = 0
    return VideoLatent(data, mask, steps)


def partition_parameters(model: VideoUNet) -> tuple[ParameterPartition, dict]:
    part = ParameterPartition(dict(model.params), model.adapter_tensors())
    return part, part.counts()


def analytic_trainable_count(config: ModelConfig) -> int:
    return 2 * config.d * config.d * len(config.adapter_layers)


def reference_claims() -> dict:
    """Published adapter size, reported alongside toy counts (not reproduced here)."""
    return {"paper_min_trainable_params": 22_000_000, "paper_fraction_of_mainstream": 0.01}
