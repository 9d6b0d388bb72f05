"""Single-head attention variants used by the video U-Net.

Token tensors are ``[..., tokens, d]``.  Projection matrices act on the right
(``Q = X @ W_Q``), so every weight is stored ``in_width x out_width``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import Tensor, add, as_tensor, matmul, mul, slice_axis, softmax_lastdim, swap_last, transpose


@dataclass
class SelfAttentionParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}


@dataclass
class CrossAttentionParams:
    Wc_Q: Tensor
    Wc_K: Tensor
    Wc_V: Tensor

    @property
    def d(self) -> int:
        return self.Wc_Q.shape[0]

    @property
    def d_cond(self) -> int:
        return self.Wc_K.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"Wc_Q": self.Wc_Q, "Wc_K": self.Wc_K, "Wc_V": self.Wc_V}


@dataclass
class AdapterParams:
    """Trainable cross-frame branch: new query projection and output projection."""

    Wp_Q: Tensor
    Wp_O: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"Wp_Q": self.Wp_Q, "Wp_O": self.Wp_O}


@dataclass
class TemporalAttentionParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    positional: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.positional is None:
            self.positional = sinusoidal_table(16, self.W_Q.shape[0])

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}


def sinusoidal_table(length: int, d: int) -> np.ndarray:
    """Fixed sin/cos positional encodings, ``length x d``."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


def _width(x: Tensor, d: int, what: str):
    if x.shape[-1] != d:
        raise DimensionError(f"{what}: token width {x.shape[-1]} (shape {x.shape}) != projection width {d}")


def attend(q, k, v) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, swap_last(k)), scale)
    return matmul(softmax_lastdim(scores), v)


def attention_weights(q, k) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    return softmax_lastdim(mul(matmul(q, swap_last(k)), scale))


def self_attention(X, p: SelfAttentionParams) -> Tensor:
    """Attention output before the ``W_O`` projection."""
    X = as_tensor(X)
    _width(X, p.d, "self_attention")
    return attend(X @ p.W_Q, X @ p.W_K, X @ p.W_V)


def cross_attention(X, cond, p: CrossAttentionParams) -> Tensor:
    X, cond = as_tensor(X), as_tensor(cond)
    _width(X, p.d, "cross_attention")
    _width(cond, p.d_cond, "cross_attention condition")
    k = cond @ p.Wc_K
    v = cond @ p.Wc_V
    if k.ndim > 2 and X.ndim > k.ndim:
        # one condition per clip, shared by every frame of that clip
        extra = (1,) * (X.ndim - k.ndim)
        k = k.reshape(k.shape[:1] + extra + k.shape[1:])
        v = v.reshape(v.shape[:1] + extra + v.shape[1:])
    return attend(X @ p.Wc_Q, k, v)


def adapter_attention(X_i, X_1, sa: SelfAttentionParams, ad: AdapterParams) -> Tensor:
    """Frame ``i`` queries (through ``Wp_Q``) attend to frame 1's frozen keys/values."""
    X_i, X_1 = as_tensor(X_i), as_tensor(X_1)
    _width(X_i, sa.d, "adapter_attention")
    _width(X_1, sa.d, "adapter_attention reference")
    try:
        np.broadcast_shapes(X_i.shape, X_1.shape)
    except ValueError:
        raise DimensionError(f"adapter_attention: frame shapes {X_i.shape} and {X_1.shape} differ") from None
    if X_i.shape[-2] != X_1.shape[-2]:
        raise DimensionError(f"adapter_attention: frame shapes {X_i.shape} and {X_1.shape} differ")
    return attend(X_i @ ad.Wp_Q, X_1 @ sa.W_K, X_1 @ sa.W_V)


def fused_block_output(X_i, X_1, sa: SelfAttentionParams, ad: AdapterParams | None) -> Tensor:
    """Original self-attention through ``W_O`` plus the adapter branch through ``Wp_O``."""
    base = self_attention(X_i, sa) @ sa.W_O
    if ad is None:
        return base
    return add(base, adapter_attention(X_i, X_1, sa, ad) @ ad.Wp_O)


def frame_self_attention(X, sa: SelfAttentionParams, ad: AdapterParams | None) -> Tensor:
    """Fused self-attention for a clip batch ``[B, F, tokens, d]``.

    Keys and values are projected once; frame 1's slice is reused as the
    adapter's reference so no extra projection is spent on it.
    """
    X = as_tensor(X)
    _width(X, sa.d, "frame_self_attention")
    if X.ndim != 4:
        raise DimensionError(f"frame_self_attention expects [B, F, tokens, d], got {X.shape}")
    k = X @ sa.W_K
    v = X @ sa.W_V
    out = attend(X @ sa.W_Q, k, v) @ sa.W_O
    if ad is None:
        return out
    k1 = slice_axis(k, 1, 0, 1)
    v1 = slice_axis(v, 1, 0, 1)
    return add(out, attend(X @ ad.Wp_Q, k1, v1) @ ad.Wp_O)


def temporal_attention(X, p: TemporalAttentionParams, h=None, positional: bool = True) -> Tensor:
    """Residual attention along the frame axis of ``[..., frames, tokens, d]``.

    Each spatial token attends over frames independently.  ``h`` is the
    (pre-normalized) input the projections read; it defaults to ``X``.
    Positional encodings are added to the query/key input only.
    """
    X = as_tensor(X)
    h = X if h is None else as_tensor(h)
    _width(X, p.d, "temporal_attention")
    if X.ndim < 3:
        raise DimensionError(f"temporal_attention expects [..., frames, tokens, d], got {X.shape}")
    frames = X.shape[-3]
    if frames > p.positional.shape[0]:
        raise ConfigurationError(f"{frames} frames exceed positional table length {p.positional.shape[0]}")
    lead = list(range(X.ndim - 3))
    perm = lead + [X.ndim - 2, X.ndim - 3, X.ndim - 1]
    ht = transpose(h, perm)  # [..., tokens, frames, d]
    qk_in = add(ht, p.positional[:frames]) if positional else ht
    out = attend(qk_in @ p.W_Q, qk_in @ p.W_K, ht @ p.W_V) @ p.W_O
    return add(X, transpose(out, perm))


def init_adapter(sa: SelfAttentionParams) -> AdapterParams:
    """Query projection copied from the host ``W_Q``; output projection all zeros."""
    return AdapterParams(
        Wp_Q=Tensor(sa.W_Q.data.copy(), requires_grad=True),
        Wp_O=Tensor(np.zeros_like(sa.W_O.data), requires_grad=True),
    )
