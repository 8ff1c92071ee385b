import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mentalstate.dataio import State
from mentalstate.dsp import Clip
from mentalstate.errors import (
    ChecksumMismatch, InvalidConfig, ShapeMismatch, VersionMismatch,
)
from mentalstate.model import (
    FORMAT_VERSION, BlockConfig, Model, ModelConfig, ResidualBlock, build_model, load_model,
    param_count, predict, save_model,
)

SMALL = ModelConfig.from_lists([9, 5], [4, 6], input_channels=3, input_len=32)


def test_default_config_shape_contract():
    cfg = ModelConfig()
    assert [b.kernel_len for b in cfg.blocks] == [65, 33, 17, 9, 5, 3]
    assert [b.channels for b in cfg.blocks] == [16, 16, 32, 32, 64, 64]
    assert cfg.lengths() == [1920 // 2 ** b for b in range(1, 7)]
    model = build_model(cfg, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 14, 1920)).astype(np.float32)
    h = x
    for b, block in enumerate(model.blocks, start=1):
        h = block.forward(h)
        assert h.shape == (2, cfg.blocks[b - 1].channels, 1920 // 2 ** b)
    assert model.forward(x).shape == (2, 3)


def test_first_kernel_covers_a_2hz_cycle():
    assert ModelConfig().blocks[0].kernel_len >= 128 / 2


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([1, 3, 5]), st.integers(1, 5), st.integers(1, 3)),
                min_size=1, max_size=3),
       st.integers(1, 3), st.integers(1, 3))
def test_any_valid_config_shapes(blocks, c_in, batch):
    factor = int(np.prod([f for _, _, f in blocks]))
    cfg = ModelConfig(input_channels=c_in, input_len=factor * 4,
                      blocks=tuple(BlockConfig(k, c, f) for k, c, f in blocks))
    model = Model(cfg, seed=1)
    x = np.random.default_rng(2).standard_normal((batch, c_in, cfg.input_len))
    assert model.forward(x.astype(np.float32)).shape == (batch, 3)
    assert cfg.lengths()[-1] == 4
    assert model.n_parameters() == param_count(cfg)


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        ModelConfig(blocks=()).validate()
    with pytest.raises(InvalidConfig):
        ModelConfig.from_lists([4], [8]).validate()
    with pytest.raises(InvalidConfig):
        ModelConfig(input_len=1000).validate()
    with pytest.raises(InvalidConfig):
        Model(ModelConfig(dropout_keep=0.0))


def test_param_count_hand_example():
    cfg = ModelConfig(input_channels=1, input_len=2, blocks=(BlockConfig(1, 1, 2),))
    assert param_count(cfg) == 14
    assert Model(cfg).n_parameters() == 14


def test_param_count_matches_structural_walk():
    model = build_model(ModelConfig(), seed=0)
    walked = 0
    for block in model.blocks:
        for layer in (block.conv1, block.bn1, block.conv2, block.bn2, block.shortcut):
            if layer is not None:
                walked += sum(p.size for p in layer.params.values())
    walked += sum(p.size for p in model.dense.params.values())
    assert walked == param_count(ModelConfig())


def test_doubling_widths_quadruples_conv_weights():
    def conv_weights(cfg):
        m = Model(cfg)
        return sum(v.size for k, v in m.named_parameters() if k.endswith("conv2.weight"))

    base = ModelConfig()
    wide = ModelConfig.from_lists([b.kernel_len for b in base.blocks],
                                  [2 * b.channels for b in base.blocks])
    assert conv_weights(wide) == 4 * conv_weights(base)


def test_same_seed_same_parameters():
    a, b = build_model(SMALL, 5), build_model(SMALL, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    c = build_model(SMALL, 6)
    assert not all(np.array_equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_initialization_conventions():
    model = build_model(ModelConfig(), 0)
    for name, v in model.named_parameters():
        if name.endswith("gamma"):
            assert np.all(v == 1)
        elif name.endswith(("beta", "bias")):
            assert np.all(v == 0)
        elif name.endswith("weight") and v.ndim == 3:
            bound = np.sqrt(6.0 / (v.shape[1] * v.shape[2]))
            assert np.abs(v).max() <= bound
            assert np.abs(v).max() > 0.8 * bound


def test_residual_degeneracy():
    rng = np.random.default_rng(0)
    block = ResidualBlock(4, BlockConfig(5, 4, 2), rng, np.float64)
    block.conv1.params["weight"][:] = 0
    block.conv2.params["weight"][:] = 0
    x = rng.standard_normal((3, 4, 16))
    y = block.forward(x, train=False)  # eval BN with running stats (0, 1) ~ identity
    relu = np.maximum(x, 0)
    expect = relu.reshape(3, 4, 8, 2).max(axis=3)
    assert np.allclose(y, expect, atol=1e-5)


def test_block_uses_projection_only_when_widths_differ():
    rng = np.random.default_rng(0)
    assert ResidualBlock(4, BlockConfig(3, 4), rng).shortcut is None
    assert ResidualBlock(4, BlockConfig(3, 8), rng).shortcut.params["weight"].shape == (8, 4, 1)


def test_forward_rejects_wrong_shape():
    with pytest.raises(ShapeMismatch):
        build_model(SMALL).forward(np.zeros((1, 2, 32), np.float32))


def _clips(n, cfg, seed=0):
    data = np.random.default_rng(seed).standard_normal((n, cfg.input_channels, cfg.input_len))
    data = (data - data.mean(axis=(1, 2), keepdims=True)) / data.std(axis=(1, 2), keepdims=True)
    return [Clip(d.astype(np.float32), State.FOCUSED, "s", i) for i, d in enumerate(data)]


def test_predict_is_deterministic_and_normalized():
    model = build_model(SMALL, 0)
    clips = _clips(5, SMALL)
    a, b = predict(model, clips + clips[:1]), predict(model, clips)
    assert np.array_equal(a[0].probabilities, a[-1].probabilities)
    for p, q in zip(a, b):
        assert np.array_equal(p.probabilities, q.probabilities)
        assert abs(p.probabilities.sum() - 1) < 1e-6
        assert np.all(p.probabilities >= 0)
        assert p.label == int(np.argmax(p.probabilities))


def test_fresh_models_are_near_uniform_over_initializations():
    # one fresh model per clip: a single untrained model in eval mode is
    # confidently biased, but no class is favoured across initializations
    cfg = ModelConfig()
    clips = _clips(200, cfg, seed=11)
    probs = np.stack([predict(build_model(cfg, seed), [clip])[0].probabilities
                      for seed, clip in enumerate(clips)])
    mean = probs.mean(axis=0)
    assert np.all((mean >= 0.2) & (mean <= 0.47)), mean


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = build_model(SMALL, 3)
    # give the BN buffers non-default values so they are exercised
    model.forward(np.random.default_rng(0).standard_normal((4, 3, 32)).astype(np.float32),
                  train=True, dropout_seed=1)
    clips = _clips(4, SMALL)
    before = [p.probabilities for p in predict(model, clips)]
    save_model(model, tmp_path / "m.nd1d")
    back = load_model(tmp_path / "m.nd1d")
    assert back.config == model.config
    for (n1, a), (n2, b) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(a, b)
    for (_, a), (_, b) in zip(model.named_buffers(), back.named_buffers()):
        assert np.array_equal(a, b)
    after = [p.probabilities for p in predict(back, clips)]
    assert all(np.array_equal(x, y) for x, y in zip(before, after))


def test_checkpoint_layout(tmp_path):
    save_model(build_model(SMALL), tmp_path / "m")
    data = (tmp_path / "m").read_bytes()
    assert data[:4] == b"ND1D" and data[4] == FORMAT_VERSION


def test_truncated_checkpoint(tmp_path):
    save_model(build_model(SMALL), tmp_path / "m")
    data = (tmp_path / "m").read_bytes()
    for cut in (len(data) - 1, len(data) // 2, 7, 3):
        (tmp_path / "t").write_bytes(data[:cut])
        with pytest.raises(ChecksumMismatch):
            load_model(tmp_path / "t")


def test_corrupted_checkpoint(tmp_path):
    save_model(build_model(SMALL), tmp_path / "m")
    data = bytearray((tmp_path / "m").read_bytes())
    data[len(data) // 2] ^= 0xFF
    (tmp_path / "c").write_bytes(bytes(data))
    with pytest.raises(ChecksumMismatch):
        load_model(tmp_path / "c")


def test_unknown_version(tmp_path):
    save_model(build_model(SMALL), tmp_path / "m")
    data = bytearray((tmp_path / "m").read_bytes())
    data[4] = FORMAT_VERSION + 1
    (tmp_path / "v").write_bytes(bytes(data))
    with pytest.raises(VersionMismatch):
        load_model(tmp_path / "v")


def test_config_dict_forms():
    cfg = ModelConfig.from_dict({"kernel_lens": [9, 5], "channels": [4, 6],
                                 "input_channels": 3, "input_len": 32})
    assert cfg == SMALL
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL
