"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line, printed in the terminal summary.  The
expensive artifacts (base A, the adapter run on A, base B) are trained once
per session.  Set ``I2V_LAB_ACCEPTANCE_CACHE=<dir>`` to reuse trained weights
across sessions; by default everything is trained from scratch.
"""

from __future__ import annotations

import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from i2v_lab import cli
from i2v_lab.attention import AdapterParams, SelfAttentionParams, fused_block_output
from i2v_lab.checkpoint import load_adapters, load_checkpoint, save_checkpoint
from i2v_lab.diffusion import cfg_combine, denoising_step, forward_diffuse, make_vp_schedule
from i2v_lab.evaluation import flow_score, frame_consistency, warping_error
from i2v_lab.numerics import Tensor, grad_check, mul, sum_
from i2v_lab.sampling import SamplerConfig, sample_i2v
from i2v_lab.similarity_prior import DegradationParams, degrade, gaussian_blur, init_video_latents
from i2v_lab.training import (
    TrainConfig,
    fixed_i2v_batches,
    from_model_space,
    generate_dataset,
    mean_i2v_loss,
    snapshot,
    to_model_space,
    train_base_stage,
    train_i2v_stage,
    verify_freeze,
)
from i2v_lab.video_model import (
    HOSTS,
    VideoUNet,
    analytic_trainable_count,
    encode_image_condition,
    make_condition,
    null_condition,
    partition_parameters,
    reference_claims,
)

pytestmark = pytest.mark.slow

T = 1000
FRAMES = 8
TRAIN_CLIPS, TRAIN_SEED = 64, 0
HELD_CLIPS, HELD_SEED = 20, 1
BASE_A_STEPS, BASE_B_STEPS = 2000, 500
I2V_STEPS = 1000
EVAL_SAMPLER = SamplerConfig(steps=25)

# Sampling evaluations start the prior at t0 = 0.6; at t0 = 1 alpha is 0.0032 and the
# toy base cannot recover layout from pure noise (pilot numbers in the decisions ledger).
EVAL_T0 = 0.6
EVAL_DP = DegradationParams(t0=EVAL_T0)

# Regression bounds frozen from the pilot run: consistency gain +0.0077 (16/20 clips),
# bound set at half of it. FlowScore p=0/0.5/1 was 0.07715/0.07745/0.07667; the endpoints fix the direction.
CONSISTENCY_MARGIN = 0.0038
P_TREND = "decreasing"


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def check(n: int, ok: bool, detail: str):
    record(n, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# shared artifacts
# ---------------------------------------------------------------------------
SCHED = make_vp_schedule(T)
_CACHE = os.environ.get("I2V_LAB_ACCEPTANCE_CACHE")


def _cached(name, build):
    if not _CACHE:
        return build()
    path = Path(_CACHE) / name
    if path.exists():
        return load_checkpoint(path)
    model = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path)
    return model


@pytest.fixture(scope="session")
def train_set():
    return generate_dataset(TRAIN_CLIPS, FRAMES, 32, 32, TRAIN_SEED)


@pytest.fixture(scope="session")
def held_set():
    return generate_dataset(HELD_CLIPS, FRAMES, 32, 32, HELD_SEED)


def _train_base(train_set, model_seed, steps, data_seed):
    def build():
        m = VideoUNet(seed=model_seed)
        train_base_stage(m, train_set, steps, seed=data_seed, schedule=SCHED, cfg=TrainConfig(steps=steps, lr=5e-4, weight_decay=0.0, log_every=0))
        return m

    return build


@pytest.fixture(scope="session")
def base_a(train_set):
    return _cached("base_a.ckpt", _train_base(train_set, 0, BASE_A_STEPS, 100))


@pytest.fixture(scope="session")
def base_b(train_set):
    return _cached("base_b.ckpt", _train_base(train_set, 1, BASE_B_STEPS, 101))


@pytest.fixture(scope="session")
def i2v_run(base_a, train_set, held_set):
    """Adapter training on a copy of base A with everything criteria 2 and 5 need."""
    model = base_a.clone()
    model.detach_adapters()
    before = snapshot(model)
    model.attach_adapters()
    probe = fixed_i2v_batches(model, held_set, 16, seed=7, schedule=SCHED)
    loss0 = mean_i2v_loss(model, probe)
    t = time.time()
    hist = train_i2v_stage(model, train_set, I2V_STEPS, seed=200, schedule=SCHED, cfg=TrainConfig(steps=I2V_STEPS, log_every=0))
    elapsed = time.time() - t
    return {
        "model": model,
        "before": before,
        "after": snapshot(model.without_adapters()),
        "hist": hist,
        "loss0": loss0,
        "loss1": mean_i2v_loss(model, probe),
        "seconds": elapsed,
    }


def _encoder(model):
    return lambda f: encode_image_condition(to_model_space(f), model).data


def _sample(model, clip, cond, seed, dp=EVAL_DP, sampler=EVAL_SAMPLER, uncond=None):
    ref = to_model_space(clip.frames[0])
    return from_model_space(sample_i2v(model, ref, cond, uncond, SCHED, FRAMES, dp, sampler, seed=seed))


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------
def test_criterion_01_zero_init_transparency():
    t = time.time()
    model = VideoUNet(seed=0)
    rng = np.random.default_rng(0)
    for p in model.params.values():
        if not p.data.any():  # give zero-initialized base tensors mass so the check is not vacuous
            p.data = 0.02 * rng.standard_normal(p.data.shape)
    base = model.without_adapters()
    model.attach_adapters()
    clip = generate_dataset(1, seed=42)[0]
    ref = to_model_space(clip.frames[0])
    equal = []
    for seed in range(5):
        mode = "deterministic" if seed % 2 == 0 else "ancestral"
        sampler = SamplerConfig(steps=6, mode=mode, guidance=2.0)
        cond = make_condition(model, np.array(clip.caption), ref)
        a = sample_i2v(model, ref, cond, null_condition(model), SCHED, FRAMES, DegradationParams(), sampler, seed)
        b = sample_i2v(base, ref, cond, null_condition(model), SCHED, FRAMES, DegradationParams(), sampler, seed)
        equal.append(a.tobytes() == b.tobytes())
    secs = time.time() - t
    check(1, all(equal) and secs < 60, f"bitwise equal on {sum(equal)}/5 seeds, {secs:.0f}s")


def test_criterion_02_freeze_invariance(i2v_run):
    ok, name = verify_freeze(i2v_run["before"], i2v_run["after"])
    norms = i2v_run["hist"].frozen_grad_norms
    zero = len(norms) == I2V_STEPS and all(n == 0.0 for n in norms)
    secs = i2v_run["seconds"]
    check(2, ok and zero and secs < 1800, f"frozen set unchanged={ok} (first diff {name}), frozen grad norm 0 at {sum(n == 0.0 for n in norms)}/{len(norms)} steps, {secs / 60:.1f} min")


def test_criterion_03_gradient_correctness():
    t = time.time()
    worst = 0.0
    d, tokens = 64, 64
    for seed in range(20):
        r = np.random.default_rng(seed)
        sa = SelfAttentionParams(*[Tensor(r.standard_normal((d, d)) / math.sqrt(d)) for _ in range(4)])
        wq, wo = r.standard_normal((d, d)) / math.sqrt(d), r.standard_normal((d, d)) / math.sqrt(d)
        xi, x1 = Tensor(r.standard_normal((tokens, d))), Tensor(r.standard_normal((tokens, d)))
        w = r.standard_normal((tokens, d))
        # axis=(-2, -1) reduces one block output; batched finite differences stack perturbed copies in front
        f_q = lambda q, ax=None: sum_(mul(fused_block_output(xi, x1, sa, AdapterParams(q, Tensor(wo))), w), axis=ax)  # noqa: E731
        f_o = lambda o, ax=None: sum_(mul(fused_block_output(xi, x1, sa, AdapterParams(Tensor(wq), o)), w), axis=ax)  # noqa: E731
        err_q = grad_check(f_q, Tensor(wq.copy()), batched_f=lambda q: f_q(q, (-2, -1)))
        err_o = grad_check(f_o, Tensor(wo.copy()), batched_f=lambda o: f_o(o, (-2, -1)))
        worst = max(worst, err_q, err_o)
    secs = time.time() - t
    check(3, worst < 1e-4 and secs < 120, f"max relative error {worst:.2e} over 20 seeds (Wp_Q, Wp_O), {secs:.0f}s")


def test_criterion_04_schedule_sampler_algebra():
    vp = float(np.max(np.abs(SCHED.alpha**2 + SCHED.sigma**2 - 1)))
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((FRAMES, 3, 32, 32))
    eps = rng.standard_normal(x0.shape)
    rt = 0.0
    for t, tp in [(1000, 980), (700, 650), (300, 299), (20, 0)]:
        out = denoising_step(forward_diffuse(x0, t, eps, SCHED), eps, t, SCHED, "deterministic", t_prev=tp)
        rt = max(rt, float(np.max(np.abs(out - forward_diffuse(x0, tp, eps, SCHED)))))
    c, u = rng.standard_normal(1000), rng.standard_normal(1000)
    cfg_res = max(float(np.max(np.abs(cfg_combine(c, u, 1.0) - c))), float(np.max(np.abs(cfg_combine(c, c, 7.5) - c))))
    check(4, vp < 1e-12 and rt < 1e-9 and cfg_res < 1e-12, f"VP residual {vp:.1e}, DDIM round trip {rt:.1e}, CFG identity {cfg_res:.1e}")


def test_criterion_05_i2v_benefit(i2v_run, base_a, held_set):
    t = time.time()
    model = i2v_run["model"]
    base = base_a.without_adapters()
    enc = _encoder(model)
    ours, theirs = [], []
    for i, clip in enumerate(held_set):
        ref = to_model_space(clip.frames[0])
        ours.append(frame_consistency(_sample(model, clip, make_condition(model, np.array(clip.caption), ref), i), enc))
        theirs.append(frame_consistency(_sample(base, clip, make_condition(base, np.array(clip.caption)), i), enc))
    gain = float(np.mean(ours) - np.mean(theirs))
    drop = 1.0 - i2v_run["loss1"] / i2v_run["loss0"]
    secs = time.time() - t + i2v_run["seconds"]
    ok = gain > CONSISTENCY_MARGIN and drop >= 0.5 and secs < 2700
    check(
        5,
        ok,
        f"consistency adapter {np.mean(ours):.4f} vs base {np.mean(theirs):.4f} (gain {gain:+.4f}, bound {CONSISTENCY_MARGIN}); "
        f"held-out masked loss {i2v_run['loss0']:.4f} -> {i2v_run['loss1']:.4f} (drop {drop:.0%}, need >=50%); {secs / 60:.1f} min",
    )


def test_criterion_06_similarity_prior(i2v_run, held_set):
    t = time.time()
    # initialization statistics against N(alpha * D(x1), sigma^2 I)
    x1 = to_model_space(held_set[0].frames[0])[:, :8, :8].copy()
    dp = DegradationParams(t0=EVAL_T0)
    t0 = dp.start_step(T)
    a, s = SCHED.alpha[t0], SCHED.sigma[t0]
    n = 10_000
    draws = np.stack([init_video_latents(x1, dp, SCHED, 2, seed=k)[0].data[1] for k in range(n)])
    mean_err = float(np.max(np.abs(draws.mean(0) - a * degrade(x1, dp))))
    var_err = float(np.max(np.abs((draws - a * degrade(x1, dp)).var(0) / s**2 - 1)))
    stats_ok = mean_err < 3 * s / math.sqrt(n) and var_err < 0.05

    model = i2v_run["model"]
    scores = {}
    for p in (0.0, 0.5, 1.0):
        fs = []
        for i, clip in enumerate(held_set):
            ref = to_model_space(clip.frames[0])
            cond = make_condition(model, np.array(clip.caption), ref)
            fs.append(flow_score(_sample(model, clip, cond, i, DegradationParams(t0=EVAL_T0, p=p))))
        scores[p] = float(np.mean(fs))
    seq = [scores[0.0], scores[0.5], scores[1.0]]
    increasing = seq[0] < seq[1] < seq[2]
    decreasing = seq[0] > seq[1] > seq[2]
    trend_ok = increasing if P_TREND == "increasing" else decreasing
    secs = time.time() - t
    check(
        6,
        stats_ok and trend_ok and secs < 600,
        f"mean err {mean_err:.2e} (< {3 * s / math.sqrt(n):.2e}), var rel err {var_err:.3f} (< 0.05); "
        f"FlowScore p=0/0.5/1: {seq[0]:.4f}/{seq[1]:.4f}/{seq[2]:.4f}, expected {P_TREND}; {secs / 60:.1f} min",
    )


def test_criterion_07_metric_oracles():
    t = time.time()
    r = np.random.default_rng(0)
    base = gaussian_blur(r.random((32, 32)), 2.0)
    base = (base - base.min()) / (base.max() - base.min())
    details, ok = [], True
    for v in (1, 2):
        clip = np.stack([np.roll(base, k * v, axis=1) for k in range(FRAMES)])
        fs, we = flow_score(clip), warping_error(clip)
        ok &= abs(fs - v) < 0.3 * v and we < 0.01
        details.append(f"v={v}: flow {fs:.3f}, warp err {we:.4f}")
    static = np.stack([base] * FRAMES)
    zs, zw = flow_score(static), warping_error(static)
    ok &= zs < 1e-9 and zw < 1e-9
    secs = time.time() - t
    check(7, ok and secs < 120, "; ".join(details) + f"; static flow {zs:.1e}, warp {zw:.1e}; {secs:.0f}s")


def test_criterion_08_parameter_accounting():
    t = time.time()
    model = VideoUNet(seed=0)
    model.attach_adapters()
    _, counts = partition_parameters(model)
    formula = sum(2 * model.config.d**2 for _ in HOSTS)
    claims = reference_claims()
    secs = time.time() - t
    ok = counts["trainable"] == formula == analytic_trainable_count(model.config) and claims["paper_min_trainable_params"] == 22_000_000 and secs < 1
    check(
        8,
        ok,
        f"trainable {counts['trainable']} = sum 2*d^2 over {len(HOSTS)} hosts = {formula}; fraction {counts['fraction']:.4f}; "
        f"published 22M / ~1% reported as context only; {secs:.2f}s",
    )


def test_criterion_09_base_swap(i2v_run, base_b, held_set):
    t = time.time()
    swapped = base_b.clone()
    load_adapters(swapped, {k: v.data for k, v in i2v_run["model"].adapter_tensors().items()})
    plain = base_b.without_adapters()
    enc = _encoder(base_b)
    wins, finite = 0, True
    for i, clip in enumerate(held_set[:5]):
        ref = to_model_space(clip.frames[0])
        v = _sample(swapped, clip, make_condition(swapped, np.array(clip.caption), ref), i)
        u = _sample(plain, clip, null_condition(plain), i)
        finite &= bool(np.isfinite(v).all())
        wins += frame_consistency(v, enc) > frame_consistency(u, enc)
    secs = time.time() - t
    check(9, finite and wins >= 3 and secs < 600, f"finite={finite}, adapter-on-B beats unconditioned B on {wins}/5 seeds; sampling {secs / 60:.1f} min")


def test_criterion_10_end_to_end_determinism(tmp_path, capsys):
    t = time.time()
    knobs = ["--set", "data.clips=4", "--set", "base.steps=6", "--set", "i2v.steps=4", "--set", "sampler.steps=6"]
    out = tmp_path / "run"
    digests = []
    for _ in range(2):
        if out.exists():
            shutil.rmtree(out)
        for cmd in ("gen-data", "train-base", "train-i2v", "sample", "eval"):
            assert cli.main([cmd, "--out", str(out), "--seed", "3", *knobs]) == 0, cmd
        digests.append({str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    capsys.readouterr()
    a, b = digests
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    secs = time.time() - t
    check(10, same, f"{len(a)} artifacts, byte-identical across two full pipeline runs={same}; {secs:.0f}s")
