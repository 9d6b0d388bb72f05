import numpy as np
import pytest

from i2v_lab.diffusion import epsilon_loss, make_vp_schedule
from i2v_lab.errors import ConfigurationError, FreezeViolation, StructuralError, TrainingError
from i2v_lab.numerics import Tensor, no_grad
from i2v_lab.training import (
    DIRECTIONS,
    AdamW,
    TrainConfig,
    _coverage,
    condition_dropout_draws,
    fixed_i2v_batches,
    generate_dataset,
    i2v_batch,
    i2v_loss,
    mean_i2v_loss,
    read_dataset_cache,
    render_clip,
    snapshot,
    to_model_space,
    train_base_stage,
    train_i2v_stage,
    verify_freeze,
    write_dataset_cache,
)
from i2v_lab.video_model import VOCAB, VideoUNet, make_condition, predict_epsilon

SCHED = make_vp_schedule(1000)


@pytest.fixture(scope="module")
def clips():
    return generate_dataset(4, l=4, seed=11)


def test_dataset_is_deterministic():
    a, b = generate_dataset(5, seed=3), generate_dataset(5, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.frames, y.frames) and x.caption == y.caption and x.velocity == y.velocity
    assert not np.array_equal(a[0].frames, generate_dataset(5, seed=4)[0].frames)


def test_translation_matches_rerendered_shape():
    """Each frame equals the shape re-rendered at the advanced (wrapped) position."""
    center = (9.3, 20.6)
    clip = render_clip("triangle", "green", "right", 1, center, 5, 32, 32)
    rgb = np.array([0.0, 1.0, 0.0])[:, None, None]
    for k in range(5):
        cov = _coverage("triangle", center[0] + k, center[1], 10.0, 32, 32)
        oracle = 0.5 * (1 - cov)[None] + rgb * cov[None]
        assert np.abs(clip[k] - oracle).max() < 1e-6


def test_every_direction_moves_by_its_velocity():
    for name, (dx, dy) in DIRECTIONS.items():
        clip = render_clip("square", "red", name, 2, (16.0, 16.0), 3, 32, 32)
        np.testing.assert_array_equal(clip[1], np.roll(clip[0], (2 * dy, 2 * dx), axis=(1, 2)))


def test_captions_match_content():
    for clip in generate_dataset(30, seed=5):
        shape, color, direction = clip.words
        assert len(clip.caption) == 3
        dx, dy = DIRECTIONS[direction]
        speed = max(abs(clip.velocity[0]), abs(clip.velocity[1]))
        assert speed in (1, 2) and clip.velocity == (dx * speed, dy * speed)
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0
        channel = {"red": 0, "green": 1, "blue": 2}[color]
        assert clip.frames[0, channel].max() > 0.99


def test_dataset_errors():
    with pytest.raises(ConfigurationError):
        generate_dataset(2, h=8, w=8)
    with pytest.raises(ConfigurationError):
        generate_dataset(0)


def test_cache_round_trip(tmp_path, clips):
    path = tmp_path / "clips.bin"
    write_dataset_cache(path, clips)
    back = read_dataset_cache(path)
    for a, b in zip(clips, back):
        assert np.array_equal(a.frames, b.frames) and a.caption == b.caption and a.velocity == b.velocity and a.seed == b.seed
    path.write_bytes(b"nonsense" + path.read_bytes()[8:])
    with pytest.raises(StructuralError):
        read_dataset_cache(path)


def test_adamw_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.5)
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3])]
    x = np.array([1.0, -2.0])
    m = v = np.zeros(2)
    for k, g in enumerate(grads, start=1):
        p.grad = g
        opt.step()
        x = x * (1 - 0.1 * 0.5)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        x = x - 0.1 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.99**k)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-14)


def test_adamw_skips_parameters_without_gradient():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW({"p": p}, weight_decay=0.1)
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_condition_dropout_rate():
    draws = condition_dropout_draws(np.random.default_rng(0), 0.1, 10_000)
    assert abs(draws.mean() - 0.1) <= 0.01


def test_initial_loss_is_noise_energy(clips):
    """A fresh network outputs exactly zero, so the loss is the mean squared target."""
    m = VideoUNet(seed=0)
    rng = np.random.default_rng(0)
    x0 = to_model_space(clips[0].frames)
    eps = rng.standard_normal(x0.shape)
    with no_grad():
        pred = predict_epsilon(0.5 * x0 + 0.8 * eps, 300, make_condition(m, clips[0].caption), m)
    assert not pred.data.any()
    loss = float(epsilon_loss(pred, eps, np.ones(4, bool)).data)
    assert loss == pytest.approx(np.mean(eps**2), rel=1e-12)
    assert abs(loss - 1.0) < 0.05


def test_i2v_batch_layout(clips):
    m = VideoUNet(seed=0)
    x, steps, cond, eps, mask = i2v_batch(m, clips, np.random.default_rng(2), SCHED, batch_size=2)
    assert x.shape == (2, 4, 3, 32, 32)
    assert (steps[:, 0] == 0).all() and (steps[:, 1:] == steps[:, 1:2]).all()
    assert mask.tolist() == [False, True, True, True]
    assert not eps[:, 0].any()
    clean_firsts = {to_model_space(c.frames[0]).tobytes() for c in clips}
    assert all(x[b, 0].tobytes() in clean_firsts for b in range(2))


def test_frame_one_target_does_not_enter_loss(clips):
    m = VideoUNet(seed=0)
    m.attach_adapters()
    x, steps, cond, eps, mask = i2v_batch(m, clips, np.random.default_rng(4), SCHED)
    bumped = eps.copy()
    bumped[:, 0] = 1e3
    with no_grad():
        a = float(i2v_loss(m, (x, steps, cond, eps, mask)).data)
        b = float(i2v_loss(m, (x, steps, cond, bumped, mask)).data)
    assert a == b


def test_fresh_adapter_loss_equals_base_loss(clips):
    base = VideoUNet(seed=0)
    for p in base.params.values():
        if not p.data.any():
            p.data = 0.05 * np.random.default_rng(1).standard_normal(p.data.shape)
    withad = base.clone()
    withad.attach_adapters()
    batches = fixed_i2v_batches(withad, clips, 2, seed=9)
    assert mean_i2v_loss(withad, batches) == mean_i2v_loss(base, batches)


def test_i2v_stage_touches_only_adapters(clips):
    m = VideoUNet(seed=0)
    train_base_stage(m, clips, 2, seed=1)
    before = snapshot(m)
    hist = train_i2v_stage(m, clips, 3, seed=2, cfg=TrainConfig(steps=3, log_every=0))
    assert hist.frozen_grad_norms == [0.0, 0.0, 0.0]
    assert all(p.grad is None for p in m.params.values())
    assert verify_freeze(before, snapshot(m)) == (True, None)
    assert any(a.Wp_O.data.any() for a in m.adapters.values())


def test_gradient_into_frozen_weight_is_fatal(clips, monkeypatch):
    m = VideoUNet(seed=0)
    monkeypatch.setattr(m, "set_base_trainable", lambda flag: None)
    for p in m.params.values():
        p.requires_grad = True
    with pytest.raises(FreezeViolation):
        train_i2v_stage(m, clips, 1, seed=0)


def test_base_stage_reports_divergence(clips):
    m = VideoUNet(seed=0)
    m.params["conv_out.b"].data[:] = np.nan
    with pytest.raises(TrainingError) as err:
        train_base_stage(m, clips, 3, seed=0)
    assert err.value.step == 0


def test_base_stage_rejects_adapters(clips):
    m = VideoUNet(seed=0)
    m.attach_adapters()
    with pytest.raises(ConfigurationError):
        train_base_stage(m, clips, 1, seed=0)


def test_verify_freeze_detects_a_single_bit():
    m = VideoUNet(seed=0)
    a = snapshot(m)
    assert verify_freeze(a, snapshot(m)) == (True, None)
    raw = bytearray(m.params["down2.down.w"].data.tobytes())
    raw[3] ^= 0x01
    m.params["down2.down.w"].data = np.frombuffer(bytes(raw), dtype=np.float64).reshape(m.params["down2.down.w"].shape).copy()
    assert verify_freeze(a, snapshot(m)) == (False, "down2.down.w")
    b = dict(a)
    b.pop("mid.sa.W_Q")
    with pytest.raises(StructuralError):
        verify_freeze(a, b)


def test_two_stage_training_is_reproducible(clips):
    def run():
        m = VideoUNet(seed=0)
        train_base_stage(m, clips, 2, seed=5)
        h = train_i2v_stage(m, clips, 2, seed=6)
        return m, h

    (m1, h1), (m2, h2) = run(), run()
    assert h1.losses == h2.losses
    for k, t in m1.named_parameters().items():
        assert t.data.tobytes() == m2.named_parameters()[k].data.tobytes()


def test_vocab_covers_captions():
    assert len(VOCAB) == 15 and VOCAB[0] == "<null>"
    assert len(DIRECTIONS) == 8
