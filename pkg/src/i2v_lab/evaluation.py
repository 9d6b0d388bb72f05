"""Desk-scale video metrics: reference consistency, Horn–Schunck flow magnitude, warping error.

All metrics take videos as ``[l, 3, H, W]`` arrays with intensities in ``[0, 1]``.
``frame_consistency`` stands in for a CLIP-based temporal score and is
labelled that way in every report.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError

LUMA = np.array([0.299, 0.587, 0.114])
HS_SMOOTHNESS = 0.1
HS_ITERATIONS = 100
_HS_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]])


@dataclass
class FlowField:
    u: np.ndarray  # horizontal displacement, px
    v: np.ndarray  # vertical displacement, px

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise DimensionError(f"flow components differ in shape: {self.u.shape} vs {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise NumericError("flow field is not finite")

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise DimensionError(f"expected [3,H,W], [1,H,W] or [H,W], got {frame.shape}")
    if frame.shape[0] == 1:
        return frame[0]
    return np.tensordot(LUMA, frame, axes=1)


def _check_video(video, min_frames=2) -> np.ndarray:
    video = np.asarray(getattr(video, "data", video), dtype=np.float64)
    if video.ndim not in (3, 4):
        raise DimensionError(f"expected a [l, C, H, W] or [l, H, W] video, got {video.shape}")
    if video.shape[0] < min_frames:
        raise ConfigurationError(f"need at least {min_frames} frames, got {video.shape[0]}")
    if not np.isfinite(video).all():
        raise NumericError("video contains non-finite values")
    return video


def _neighbour_mean(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, 1, mode="edge")
    h, w = f.shape
    out = np.zeros_like(f)
    for dy in range(3):
        for dx in range(3):
            if _HS_KERNEL[dy, dx]:
                out += _HS_KERNEL[dy, dx] * p[dy : dy + h, dx : dx + w]
    return out


def estimate_flow(frame_a, frame_b, iterations: int = HS_ITERATIONS, smoothness: float = HS_SMOOTHNESS) -> FlowField:
    """Horn–Schunck flow taking ``frame_a`` to ``frame_b``.

    Gradients are central differences of the frame average, the temporal
    derivative is ``b - a`` and the flow starts at zero.
    """
    a, b = to_gray(frame_a), to_gray(frame_b)
    if a.shape != b.shape:
        raise DimensionError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NumericError("non-finite frame passed to estimate_flow")
    if iterations < 0 or not smoothness > 0:
        raise ConfigurationError("iterations must be >= 0 and smoothness > 0")
    m = 0.5 * (a + b)
    Iy, Ix = np.gradient(m)
    It = b - a
    denom = smoothness + Ix**2 + Iy**2
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    for _ in range(iterations):
        ub, vb = _neighbour_mean(u), _neighbour_mean(v)
        r = (Ix * ub + Iy * vb + It) / denom
        u = ub - Ix * r
        v = vb - Iy * r
    return FlowField(u, v)


def video_flows(video, **kw) -> list[FlowField]:
    video = _check_video(video)
    return [estimate_flow(video[i], video[i + 1], **kw) for i in range(video.shape[0] - 1)]


def flow_score(video, **kw) -> float:
    """Mean flow magnitude over consecutive pairs and pixels, px/frame."""
    return float(np.mean([f.magnitude.mean() for f in video_flows(video, **kw)]))


def warp(frame: np.ndarray, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Carry ``frame`` along ``flow``: ``out(x) = frame(x - flow(x))``, bilinear, border clamp.

    Also returns a mask of pixels whose source lies inside the frame.
    """
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[-2:]
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx, sy = xx - flow.u, yy - flow.v
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(int), w - 2)
    y0 = np.minimum(np.floor(sy).astype(int), h - 2)
    fx, fy = sx - x0, sy - y0
    g = lambda y, x: frame[..., y, x]  # noqa: E731
    out = (
        g(y0, x0) * (1 - fx) * (1 - fy)
        + g(y0, x0 + 1) * fx * (1 - fy)
        + g(y0 + 1, x0) * (1 - fx) * fy
        + g(y0 + 1, x0 + 1) * fx * fy
    )
    return out, valid


def warping_error(video, flows: list[FlowField] | None = None, exclude_invalid: bool = False, **kw) -> float:
    """Mean squared error between flow-warped frame i and frame i+1, averaged over pairs.

    ``flows`` overrides the estimated flow; ``exclude_invalid`` drops pixels
    whose warp source falls outside the frame.
    """
    video = _check_video(video)
    flows = flows if flows is not None else video_flows(video, **kw)
    if len(flows) != video.shape[0] - 1:
        raise DimensionError(f"{len(flows)} flows for {video.shape[0]} frames")
    errs = []
    for i, fl in enumerate(flows):
        warped, valid = warp(video[i], fl)
        sq = (warped - video[i + 1]) ** 2
        if sq.ndim == 3:
            sq = sq.mean(axis=0)
        errs.append(sq[valid].mean() if exclude_invalid else sq.mean())
    return float(np.mean(errs))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def frame_consistency(video, encoder) -> float:
    """Mean cosine similarity of each later frame's encoder embedding to frame 1's.

    ``encoder`` maps one ``[C, H, W]`` frame to any array; it is flattened.
    """
    video = _check_video(video)
    emb = [np.asarray(getattr(e := encoder(f), "data", e)) for f in video]
    return float(np.mean([cosine(emb[i], emb[0]) for i in range(1, len(emb))]))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass
class MetricReport:
    consistency: float
    flow_score: float
    warping_error: float
    trainable_fraction: float
    consistency_kind: str = "content-encoder cosine (stand-in for a CLIP temporal score)"

    def __post_init__(self):
        for k in ("consistency", "flow_score", "warping_error", "trainable_fraction"):
            if not np.isfinite(getattr(self, k)):
                raise NumericError(f"metric {k} is not finite")

    def to_json(self, config: dict, seed: int, **extra) -> str:
        doc = asdict(self)
        doc["config_hash"] = config_hash(config)
        doc["seed"] = seed
        doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=True)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def evaluate_video(video, encoder, trainable_fraction: float) -> MetricReport:
    video = _check_video(video)
    return MetricReport(
        consistency=frame_consistency(video, encoder),
        flow_score=flow_score(video),
        warping_error=warping_error(video),
        trainable_fraction=trainable_fraction,
    )
