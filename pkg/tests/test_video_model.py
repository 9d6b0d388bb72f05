import numpy as np
import pytest

from i2v_lab.attention import AdapterParams
from i2v_lab.errors import ConfigurationError, DimensionError
from i2v_lab.numerics import Tensor
from i2v_lab.video_model import (
    HOSTS,
    VOCAB,
    ModelConfig,
    VideoUNet,
    analytic_trainable_count,
    assemble_i2v_input,
    caption_ids,
    encode_image_condition,
    make_condition,
    null_condition,
    partition_parameters,
    predict_epsilon,
    reference_claims,
)


def _res(ci, co, temb=64):
    n = 2 * ci + co * ci * 9 + co + temb * co + co + 2 * co + co * co * 9 + co
    return n + (co * ci + co if ci != co else 0)


def expected_base_count():
    """Hand count for the default toy architecture (32/64 channels, d=64, d_cond=32, 15 words)."""
    n = 32 * 64 + 64 + 64 * 64 + 64  # timestep MLP
    n += 15 * 32  # caption embedding
    n += 16 * 3 * 9 + 32 * 16 * 9 + 32 * 32 * 9  # content encoder, no biases
    n += 32 * 3 * 9 + 32  # conv_in
    n += _res(32, 32) + _res(64, 64) + _res(64, 64) + _res(128, 64) + _res(64, 32)
    n += (64 * 32 * 9 + 64) + (64 * 64 * 9 + 64) + (32 * 64 * 9 + 32)  # resamplers
    n += 64 + 3 * 32 * 9 + 3  # output norm and conv
    n += 3 * (6 * 64 + 8 * 64 * 64 + 64 * 64 + 2 * 32 * 64)  # attention hosts
    return n


def rand_video(rng, l=3, b=None):
    shape = (l, 3, 32, 32) if b is None else (b, l, 3, 32, 32)
    return rng.standard_normal(shape)


def perturbed(model, rng):
    """Copy with every zero-initialized weight filled so no branch is trivially silent."""
    m = model.clone()
    for k, p in m.params.items():
        if not p.data.any():
            p.data = 0.05 * rng.standard_normal(p.data.shape)
    return m


@pytest.fixture(scope="module")
def live(small_model):
    return perturbed(small_model, np.random.default_rng(3))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d=48)
    with pytest.raises(ConfigurationError):
        ModelConfig(groups=5)
    with pytest.raises(ConfigurationError):
        ModelConfig(image_tokens=3)
    with pytest.raises(ConfigurationError):
        ModelConfig(resolution=0)


def test_output_shape_and_batching(live, rng):
    x = rand_video(rng, b=2)
    cond = np.stack([make_condition(live, [1, 4, 7]).tokens().data] * 2)
    out = predict_epsilon(x, np.array([[0, 5, 5], [0, 9, 9]]), cond, live)
    assert out.shape == x.shape
    single = predict_epsilon(x[1], np.array([0, 9, 9]), cond[1], live)
    np.testing.assert_allclose(single.data, out.data[1], atol=1e-10)


def test_fresh_adapter_forward_is_bitwise_transparent(live, rng):
    x = rand_video(rng)
    cond = make_condition(live, [2, 5, 9], x[0])
    base = predict_epsilon(x, np.array([0, 400, 400]), cond, live).data
    m = live.clone()
    m.attach_adapters()
    np.testing.assert_array_equal(predict_epsilon(x, np.array([0, 400, 400]), cond, m).data, base)


def test_adapter_changes_output_once_trained(live, rng):
    x = rand_video(rng)
    cond = make_condition(live, [2, 5, 9])
    m = live.clone()
    m.attach_adapters()
    for ad in m.adapters.values():
        ad.Wp_O.data = 0.1 * rng.standard_normal(ad.Wp_O.shape)
    diff = predict_epsilon(x, 300, cond, m).data - predict_epsilon(x, 300, cond, live).data
    assert np.abs(diff).max() > 1e-6


def test_forward_is_deterministic(live, rng):
    x = rand_video(rng)
    cond = make_condition(live, [1, 4, 7])
    a = predict_epsilon(x, 100, cond, live).data
    b = predict_epsilon(x.copy(), 100, cond, live).data
    np.testing.assert_array_equal(a, b)


def test_single_frame_runs(live, rng):
    out = predict_epsilon(rand_video(rng, l=1), 10, make_condition(live, [1, 4, 7]), live)
    assert out.shape == (1, 3, 32, 32) and np.isfinite(out.data).all()


def test_permuting_later_frames_permutes_output_without_positions(live, rng):
    m = live.clone()
    m.attach_adapters()
    for ad in m.adapters.values():
        ad.Wp_O.data = 0.1 * rng.standard_normal(ad.Wp_O.shape)
    x = rand_video(rng, l=4)
    steps = np.array([0, 200, 200, 200])
    cond = make_condition(m, [1, 4, 7], x[0])
    order = [0, 3, 1, 2]
    out = predict_epsilon(x, steps, cond, m, use_positional=False).data
    out_p = predict_epsilon(x[order], steps, cond, m, use_positional=False).data
    np.testing.assert_allclose(out_p, out[order], atol=1e-10)


def test_shape_errors(live, rng):
    with pytest.raises(DimensionError):
        predict_epsilon(rng.standard_normal((2, 3, 16, 16)), 1, make_condition(live, [1, 2, 3]), live)
    with pytest.raises(DimensionError):
        predict_epsilon(rand_video(rng), 1, np.zeros((3, 7)), live)
    with pytest.raises(DimensionError):
        encode_image_condition(rng.standard_normal((3, 16, 16)), live)


def test_encoder_properties(live, rng):
    assert not encode_image_condition(np.zeros((3, 32, 32)), live).data.any()
    a = encode_image_condition(rng.standard_normal((3, 32, 32)), live).data
    b = encode_image_condition(rng.standard_normal((3, 32, 32)), live).data
    assert a.shape == (4, 32)
    assert np.abs(a - b).max() > 1e-9


def test_condition_tokens(live, rng):
    c = make_condition(live, [1, 4, 7], rng.standard_normal((3, 32, 32)))
    assert c.tokens().shape == (7, 32)
    assert null_condition(live).tokens().shape == (3, 32)
    assert make_condition(live, [1, 4, 7]).image_tokens is None
    assert caption_ids(["circle", "red", "up"]) == [VOCAB.index("circle"), VOCAB.index("red"), VOCAB.index("up")]
    with pytest.raises(DimensionError):
        make_condition(live, [99])


def test_assemble_i2v_input(rng):
    first = rng.standard_normal((3, 4, 4))
    rest = [rng.standard_normal((3, 4, 4)) for _ in range(3)]
    v = assemble_i2v_input(first, rest, 250)
    np.testing.assert_array_equal(v.data[0], first)
    assert v.frame_mask.tolist() == [False, True, True, True]
    assert v.steps.tolist() == [0, 250, 250, 250]
    with pytest.raises(ConfigurationError):
        assemble_i2v_input(first, [], 5)
    with pytest.raises(DimensionError):
        assemble_i2v_input(first, [np.zeros((3, 2, 2))], 5)


def test_parameter_partition_counts():
    m = VideoUNet(seed=0)
    m.attach_adapters()
    part, counts = partition_parameters(m)
    d = m.config.d
    assert set(part.frozen).isdisjoint(part.trainable)
    assert set(part.frozen) | set(part.trainable) == set(m.named_parameters())
    assert sorted(part.trainable) == sorted(f"adapter.{h}.{w}" for h in HOSTS for w in ("Wp_Q", "Wp_O"))
    assert counts["trainable"] == 2 * d * d * len(HOSTS) == analytic_trainable_count(m.config)
    assert counts["frozen"] == expected_base_count()
    assert counts["fraction"] == counts["trainable"] / (counts["trainable"] + counts["frozen"])
    assert reference_claims()["paper_min_trainable_params"] == 22_000_000


def test_adapter_params_are_separate_objects():
    m = VideoUNet(seed=0)
    ads = m.attach_adapters()
    assert all(isinstance(a, AdapterParams) for a in ads.values())
    ads["mid"].Wp_Q.data += 1.0
    assert not np.array_equal(ads["mid"].Wp_Q.data, m.params["mid.sa.W_Q"].data)
    assert isinstance(m.params["mid.sa.W_Q"], Tensor)
