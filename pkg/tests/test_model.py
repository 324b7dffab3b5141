import numpy as np
import pytest

from sta_lab.model import (
    Bottleneck,
    ModelConfig,
    StageConfig,
    StageError,
    StaUNet,
    parameter_count,
)
from sta_lab.tensor import ShapeError, Tensor, no_grad
from sta_lab.train import composite_loss

DESK_STAGES = (StageConfig(1, (4, 4), 2), StageConfig(2, (2, 2), 4), StageConfig(3, (1, 1), 8), StageConfig(4, (1, 1), 16))


def desk_config(c0=8, classes=3, extent=32):
    return ModelConfig(input_channels=1, num_classes=classes, base_channels=c0, input_size=(extent, extent),
                       stages=DESK_STAGES)


@pytest.fixture(scope="module")
def desk_model():
    return StaUNet(desk_config(), seed=3)


def test_forward_backward_smoke(desk_model):
    x = np.random.default_rng(0).random((2, 1, 32, 32), dtype=np.float32)
    y = np.random.default_rng(1).integers(0, 3, (2, 32, 32))
    desk_model.zero_grad()
    probs = desk_model(x)
    assert probs.shape == (2, 3, 32, 32)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-5)
    loss, _, _ = composite_loss(probs, y)
    loss.backward()
    for name, p in desk_model.named_parameters():
        assert p.grad is not None and p.grad.shape == p.shape, name
    # gradient reaches the first encoder conv
    assert np.linalg.norm(desk_model.encoders[0].conv1.weight.grad) > 0


def test_stage_extents_and_channels(desk_model):
    taps = {}
    with no_grad():
        desk_model.eval()(np.zeros((1, 1, 32, 32), np.float32), taps=taps)
    desk_model.train()
    assert [taps[f"enc{k}.sta0"].shape for k in (1, 2, 3, 4)] == [
        (1, 8, 16, 16), (1, 16, 8, 8), (1, 32, 4, 4), (1, 64, 2, 2)]
    assert [taps[f"dec{k}.sta0"].shape for k in (4, 3, 2, 1)] == [
        (1, 64, 4, 4), (1, 32, 8, 8), (1, 16, 16, 16), (1, 8, 32, 32)]
    assert list(taps) == desk_model.block_names()


def test_skip_taps_are_pre_pool(desk_model):
    x = Tensor(np.zeros((1, 1, 32, 32), np.float32))
    with no_grad():
        extents = []
        for enc in desk_model.encoders:
            x, skip = enc(x)
            extents.append(skip.shape[-1])
    assert extents == [32, 16, 8, 4]


def test_block_names_shallow_to_deep(desk_model):
    names = desk_model.block_names()
    assert len(names) == 2 * (1 + 2 + 3 + 4)
    assert names[0] == "enc1.sta0" and names[-1] == "dec1.sta0"


def test_bottleneck_zero_weights_gives_beta(rng):
    b = Bottleneck(4, rng, np.float64)
    for conv in (b.conv1, b.conv2):
        conv.weight.data[:] = 0
        conv.bias.data[:] = 0
    b.bn2.beta.data[:] = [0.5, -0.5, 0.0, 2.0]
    out = b(Tensor(rng.standard_normal((2, 4, 3, 3)))).data
    np.testing.assert_allclose(out, np.broadcast_to(np.array([0.5, 0, 0, 2.0])[None, :, None, None], out.shape))


def test_identity_sta_reduces_to_conv_unet():
    m = StaUNet(desk_config(), seed=0)
    for blocks in [e.blocks for e in m.encoders] + [d.blocks for d in m.decoders]:
        for blk in blocks:
            blk.cpe_weight.data[:] = 0
            blk.cpe_bias.data[:] = 0
            blk.wv.data[:] = 0
    taps = {}
    x = np.random.default_rng(2).random((1, 1, 32, 32), dtype=np.float32)
    with no_grad():
        out = m.eval()(x, taps=taps)
    assert np.all(np.isfinite(out.data))
    # every block is now an identity map: consecutive taps in one stage coincide
    np.testing.assert_array_equal(taps["enc4.sta0"].data, taps["enc4.sta3"].data)


def test_parameter_count_matches_closed_form():
    cfg = desk_config(16)
    assert sum(p.size for p in StaUNet(cfg).parameters()) == parameter_count(cfg)


def test_state_dict_round_trip():
    a, b = StaUNet(desk_config(), seed=1), StaUNet(desk_config(), seed=2)
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb
        np.testing.assert_array_equal(pa, pb)


def test_state_dict_mismatch():
    small, big = StaUNet(desk_config(8)), StaUNet(desk_config(16))
    with pytest.raises(ShapeError):
        small.load_state_dict(big.state_dict())


def test_seed_determinism():
    a, b = StaUNet(desk_config(), seed=5), StaUNet(desk_config(), seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)


@pytest.mark.parametrize("kwargs, match", [
    (dict(input_size=(48, 48)), "divisible by 32"),
    (dict(stages=DESK_STAGES[:3]), "4 stage"),
    (dict(stages=(StageConfig(1, (4, 4), 3),) + DESK_STAGES[1:]), "heads"),
])
def test_config_rejects(kwargs, match):
    base = dict(num_classes=3, base_channels=8, input_size=(32, 32), stages=DESK_STAGES)
    base.update(kwargs)
    with pytest.raises(ValueError, match=match):
        ModelConfig(**base)


def test_token_grid_must_divide_extent():
    cfg = ModelConfig(num_classes=3, base_channels=8, input_size=(32, 32),
                      stages=(StageConfig(1, (3, 3), 2),) + DESK_STAGES[1:])
    with pytest.raises(ValueError, match="encoder stage 1"):
        StaUNet(cfg)


def test_wrong_input_extent_names_stage(desk_model):
    with pytest.raises(StageError, match="encoder stage"):
        with no_grad():
            desk_model(np.zeros((1, 1, 36, 36), np.float32))  # 18 is not a multiple of 4
