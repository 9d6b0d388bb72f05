"""``i2v-lab`` command line: gen-data, train-base, train-i2v, sample, eval, params.

Exit codes: 0 success, 2 missing input artifact (checkpoint, frames),
3 configuration error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .config import DEFAULTS, RunConfig, load_config
from .diffusion import make_vp_schedule
from .errors import ConfigurationError, I2VLabError, NumericError, TrainingError
from .evaluation import MetricReport, config_hash, evaluate_video
from .sampling import SamplerConfig, sample_i2v
from .similarity_prior import DegradationParams
from .training import (
    TrainConfig,
    from_model_space,
    generate_dataset,
    read_dataset_cache,
    snapshot,
    to_model_space,
    train_base_stage,
    train_i2v_stage,
    verify_freeze,
    write_dataset_cache,
)
from .video_model import (
    VOCAB,
    ModelConfig,
    VideoUNet,
    analytic_trainable_count,
    caption_ids,
    encode_image_condition,
    make_condition,
    null_condition,
    partition_parameters,
    reference_claims,
)

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4
SEED_KEYS = {"gen-data": "data.seed", "train-base": "base.seed", "train-i2v": "i2v.seed", "sample": "sample.seed", "eval": "sample.seed", "params": "model.seed"}

log = logging.getLogger("i2v_lab")


class MissingArtifact(I2VLabError, FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# PPM frames
# ---------------------------------------------------------------------------
def write_ppm(path, frame01: np.ndarray) -> None:
    """Binary P6, maxval 255, from a ``[3, H, W]`` array in [0, 1]."""
    img = np.clip(np.round(255.0 * np.asarray(frame01, dtype=np.float64)), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ConfigurationError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    img = np.frombuffer(data[pos : pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        resolution=cfg["model.resolution"],
        channels=tuple(cfg["model.channels"]),
        d=cfg["model.d"],
        d_cond=cfg["model.d_cond"],
        max_frames=cfg["model.max_frames"],
        groups=cfg["model.groups"],
        image_tokens=cfg["model.image_tokens"],
    )


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def _dataset(cfg: RunConfig):
    path = cfg.path("data")
    if path.exists():
        return read_dataset_cache(path)
    r = cfg["model.resolution"]
    return generate_dataset(cfg["data.clips"], cfg["data.frames"], r, r, cfg["data.seed"])


def _heldout(cfg: RunConfig):
    r = cfg["model.resolution"]
    return generate_dataset(cfg["data.heldout_clips"], cfg["data.frames"], r, r, cfg["data.heldout_seed"])


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig) -> dict:
    r = cfg["model.resolution"]
    clips = generate_dataset(cfg["data.clips"], cfg["data.frames"], r, r, cfg["data.seed"])
    path = cfg.path("data")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset_cache(path, clips)
    return {"dataset": str(path), "clips": len(clips), "sha256": file_sha256(path)}


def cmd_train_base(cfg: RunConfig) -> dict:
    clips = _dataset(cfg)
    model = VideoUNet(model_config(cfg), seed=cfg["model.seed"])
    tc = TrainConfig(
        steps=cfg["base.steps"], lr=cfg["base.lr"], weight_decay=cfg["base.weight_decay"], batch_size=cfg["base.batch_size"],
        cond_dropout=cfg["base.cond_dropout"], content_dropout=cfg["base.content_dropout"],
    )
    hist = train_base_stage(model, clips, tc.steps, cfg["base.seed"], make_vp_schedule(cfg["schedule.T"]), tc)
    path = cfg.path("base")
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(model, path)
    _write_json(path.with_suffix(".losses.json"), hist.losses)
    return {"checkpoint": str(path), "sha256": digest, "final_loss": hist.losses[-1] if hist.losses else None}


def cmd_train_i2v(cfg: RunConfig) -> dict:
    model = load_checkpoint(_require(cfg.path("base"), "base checkpoint"))
    clips = _dataset(cfg)
    before = snapshot(model.without_adapters())
    model.attach_adapters()
    tc = TrainConfig(
        steps=cfg["i2v.steps"], lr=cfg["i2v.lr"], weight_decay=cfg["i2v.weight_decay"], betas=(cfg["i2v.beta1"], cfg["i2v.beta2"]),
        eps=cfg["i2v.eps"], batch_size=cfg["i2v.batch_size"], cond_dropout=cfg["i2v.cond_dropout"],
    )
    hist = train_i2v_stage(model, clips, tc.steps, cfg["i2v.seed"], make_vp_schedule(cfg["schedule.T"]), tc)
    ok, name = verify_freeze(before, snapshot(model.without_adapters()))
    if not ok:
        raise NumericError(f"frozen parameter {name} changed during adapter training")
    path = cfg.path("i2v")
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(model, path)
    _write_json(path.with_suffix(".losses.json"), {"losses": hist.losses, "frozen_grad_norms": hist.frozen_grad_norms})
    return {"checkpoint": str(path), "sha256": digest, "final_loss": hist.losses[-1] if hist.losses else None, "frozen_unchanged": ok}


def cmd_sample(cfg: RunConfig) -> dict:
    ckpt = _require(cfg.path(cfg["sample.model"]), f"{cfg['sample.model']} checkpoint")
    model = load_checkpoint(ckpt)
    if cfg["sample.model"] == "base":
        model.detach_adapters()
    if cfg["sample.reference"]:
        reference01 = read_ppm(_require(Path(cfg["sample.reference"]), "reference frame"))
        words = []
    else:
        held = _heldout(cfg)
        if not 0 <= cfg["sample.clip"] < len(held):
            raise ConfigurationError(f"sample.clip: index {cfg['sample.clip']} outside held-out set of {len(held)}")
        clip = held[cfg["sample.clip"]]
        reference01, words = clip.frames[0], list(clip.words)
    if cfg["sample.caption"]:
        words = cfg["sample.caption"].split()
    try:
        ids = caption_ids(words) if words else [0, 0, 0]
    except ValueError as exc:
        raise ConfigurationError(f"sample.caption: unknown word ({exc}); vocabulary is {VOCAB[1:]}") from exc
    ref = to_model_space(reference01)
    cond = make_condition(model, np.array(ids), ref)
    dp = DegradationParams(cfg["prior.t0"], cfg["prior.p"], cfg["prior.blur_sigma"], cfg["prior.mask_seed"])
    sampler = SamplerConfig(cfg["sampler.steps"], cfg["sampler.mode"], cfg["sampler.guidance"], cfg["prior.enabled"], cfg["sampler.clip_x0"])
    video = sample_i2v(model, ref, cond, null_condition(model), make_vp_schedule(cfg["schedule.T"]), cfg["sample.frames"], dp, sampler, cfg["sample.seed"])
    out = cfg.path("samples")
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, frame in enumerate(from_model_space(video), start=1):
        name = f"frame_{i:04d}.ppm"
        write_ppm(out / name, frame)
        files.append(name)
    manifest = {
        "files": files,
        "caption": words,
        "caption_ids": ids,
        "seeds": {"sample": cfg["sample.seed"], "mask": cfg["prior.mask_seed"], "model": cfg["model.seed"], "data": cfg["data.seed"], "heldout": cfg["data.heldout_seed"]},
        "t0": cfg["prior.t0"],
        "p": cfg["prior.p"],
        "w": cfg["sampler.guidance"],
        "checkpoint": {"path": str(ckpt), "sha256": file_sha256(ckpt), "kind": cfg["sample.model"]},
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg.to_dict()),
    }
    _write_json(out / "manifest.json", manifest)
    return {"samples": str(out), "frames": len(files)}


def cmd_eval(cfg: RunConfig) -> dict:
    out = cfg.path("samples")
    manifest = json.loads(_require(out / "manifest.json", "sample manifest").read_text())
    video = np.stack([read_ppm(_require(out / f, "frame")) for f in manifest["files"]])
    model = load_checkpoint(_require(Path(manifest["checkpoint"]["path"]), "checkpoint"))
    if not model.adapters:
        model.attach_adapters()
    _, counts = partition_parameters(model)
    encoder = lambda f: encode_image_condition(to_model_space(f), model).data  # noqa: E731
    report = evaluate_video(video, encoder, counts["fraction"])
    path = cfg.path("metrics")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json(cfg.to_dict(), manifest["seeds"]["sample"], checkpoint_sha256=manifest["checkpoint"]["sha256"]) + "\n")
    return {"metrics": str(path), **{k: v for k, v in json.loads(path.read_text()).items() if k in MetricReport.__dataclass_fields__}}


def cmd_params(cfg: RunConfig) -> dict:
    model = VideoUNet(model_config(cfg), seed=cfg["model.seed"])
    model.attach_adapters()
    _, counts = partition_parameters(model)
    return {**counts, "analytic_trainable": analytic_trainable_count(model.config), "reference_not_reproduced": reference_claims()}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "train-i2v": cmd_train_i2v,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="i2v-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", help="JSON file of flat namespaced keys")
    ap.add_argument("--seed", type=int, help="seed for the command's own randomness")
    ap.add_argument("--out", help="run directory (sets paths.run)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key; repeatable")
    ap.add_argument("--list-keys", action="store_true", help="print every config key with its default and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _threads() -> int | None:
    raw = os.environ.get("I2V_LAB_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"I2V_LAB_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigurationError(f"I2V_LAB_THREADS must be >= 0, got {n}")
    return n or None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.list_keys:
        for k, (default, doc) in DEFAULTS.items():
            print(f"{k} = {json.dumps(default)}  # {doc}")
        return EXIT_OK
    try:
        overrides = list(args.set)
        if args.out is not None:
            overrides.append(f"paths.run={json.dumps(args.out)}")
        if args.seed is not None:
            overrides.append(f"{SEED_KEYS[args.command]}={args.seed}")
        cfg = load_config(args.config, overrides)
        threads = _threads()
        print(json.dumps({"command": args.command, "seed": cfg[SEED_KEYS[args.command]], "config": cfg.to_dict()}, sort_keys=True))
        limit = threadpool_limits(threads) if threads else contextlib.nullcontext()
        with limit:
            result = COMMANDS[args.command](cfg)
        print(json.dumps(result, sort_keys=True))
        return EXIT_OK
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
