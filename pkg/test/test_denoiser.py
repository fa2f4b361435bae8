import pytest
import torch
import torch.nn as nn

from src.denoiser.unet import UNet
from src.denoiser.unet import ResBlock
from src.denoiser.unet import AttnBlock
from src.denoiser.unet import TimeEmbedding
from src.denoiser.unet import DenoiserConfig
from src.denoiser.unet import count_parameters
from src.denoiser.unet import sinusoidal_encoding
from src.denoiser.conditional import build_denoiser
from src.denoiser.conditional import ConditionalDenoiser
from src.context.encoders import xavier_init
from src.context.encoders import CurveEncoder
from src.context.encoders import ContextBundle
from src.utils.exceptions import ContractError
from src.utils.exceptions import ConfigurationError


def _config(**overrides):
    settings = {"base_channels" : 4, "channel_multipliers" : (1, 2), "attention_resolutions" : (16,), "embedding_width" : 16}

    return DenoiserConfig(**{**settings, **overrides})


def _live_unet(dtype = torch.float32, **overrides):
    unet = UNet(_config(**overrides)).to(dtype)
    nn.init.xavier_uniform_(unet.tail[-1].weight)

    return unet.eval()


# -------------------------
# CONFIGURATION
# -------------------------

def test_config_settings_round_trip():
    config = _config(channel_multipliers = (1, 2, 2, 2))

    assert DenoiserConfig.from_settings(config.to_settings()) == config
    assert config.resolutions == (32, 16, 8, 4)
    assert isinstance(config.to_settings()["channel_multipliers"], list)


@pytest.mark.parametrize("overrides", [{"canvas" : 30, "channel_multipliers" : (1, 2, 2)}, {"embedding_width" : 15},
                                       {"channel_multipliers" : ()}, {"base_channels" : 0}])
def test_invalid_configs(overrides):
    with pytest.raises(ConfigurationError):
        _config(**overrides)


def test_from_settings_ignores_extra_keys():
    config = DenoiserConfig.from_settings({"base_channels" : 8, "use_curve" : True, "T" : 1000})

    assert config.base_channels == 8


# -------------------------
# TIME EMBEDDING
# -------------------------

def test_sinusoidal_encoding_layout():
    encoding = sinusoidal_encoding(torch.tensor([0, 5]), 8)

    assert encoding.shape == (2, 8)
    assert torch.all(encoding[0, :4] == 0.0)
    assert torch.all(encoding[0, 4:] == 1.0)
    assert float(encoding[1, 0]) == pytest.approx(torch.sin(torch.tensor(5.0, dtype = torch.float64)).item())


def test_sinusoidal_encoding_distinguishes_steps():
    encoding = sinusoidal_encoding(torch.arange(1, 1001), 128)
    distance = torch.cdist(encoding, encoding)
    distance.fill_diagonal_(float("inf"))

    assert float(distance.min()) > 1e-3


def test_time_embedding_width_and_zero_weights():
    embedding = TimeEmbedding(16)

    assert embedding(torch.tensor([1, 2, 3])).shape == (3, 16)

    for parameter in embedding.parameters():
        nn.init.zeros_(parameter)

    assert torch.all(embedding(torch.tensor([1, 500, 1000])) == 0.0)


# -------------------------
# U-NET
# -------------------------

def test_output_shapes():
    unet           = UNet(_config())
    eps, v_raw     = unet(torch.randn((3, 1, 32, 32)), torch.randn((3, 16)))

    assert eps.shape == (3, 1, 32, 32)
    assert v_raw.shape == (3, 1, 32, 32)


def test_tail_starts_at_zero():
    eps, v_raw = UNet(_config())(torch.randn((2, 1, 32, 32)), torch.randn((2, 16)))

    assert torch.all(eps == 0.0)
    assert torch.all(v_raw == 0.0)


def test_deep_configuration_runs():
    unet       = _live_unet(channel_multipliers = (1, 2, 2, 2), attention_resolutions = (16, 8, 4))
    eps, v_raw = unet(torch.randn((2, 1, 32, 32)), torch.randn((2, 16)))

    assert eps.shape == (2, 1, 32, 32)
    assert torch.isfinite(v_raw).all()


def test_attention_placement_follows_resolutions():
    default = UNet(_config(channel_multipliers = (1, 2, 2, 2), attention_resolutions = (16, 8, 4)))
    shifted = UNet(_config(channel_multipliers = (1, 2, 2, 2), attention_resolutions = (32, 16, 8)))

    assert isinstance(default.middleblocks[0].attn, AttnBlock)
    assert isinstance(default.middleblocks[1].attn, nn.Identity)
    assert isinstance(default.downblocks[0].attn, nn.Identity)

    assert isinstance(shifted.middleblocks[0].attn, nn.Identity)
    assert isinstance(shifted.downblocks[0].attn, AttnBlock)


def test_rows_are_processed_independently():
    unet      = _live_unet()
    x         = torch.randn((1, 1, 32, 32)).repeat(2, 1, 1, 1)
    emb       = torch.randn((1, 16)).repeat(2, 1)

    with torch.no_grad():
        eps, _    = unet(x, emb)
        x[1]      = torch.randn((1, 32, 32))
        moved, _  = unet(x, emb)

    torch.testing.assert_close(eps[0], eps[1])
    torch.testing.assert_close(moved[0], eps[0])


def test_embedding_changes_prediction():
    unet = _live_unet()
    x    = torch.randn((1, 1, 32, 32))

    with torch.no_grad():
        first, _  = unet(x, torch.randn((1, 16)))
        second, _ = unet(x, torch.randn((1, 16)))

    assert not torch.allclose(first, second)


@pytest.mark.parametrize("shape, emb_shape", [((2, 1, 28, 28), (2, 16)), ((2, 32, 32), (2, 16)), ((2, 1, 32, 32), (2, 8)), ((2, 1, 32, 32), (3, 16))])
def test_shape_contract(shape, emb_shape):
    with pytest.raises(ContractError):
        UNet(_config())(torch.zeros(shape), torch.zeros(emb_shape))


def test_parameter_count_is_stable():
    assert count_parameters(UNet(_config())) == count_parameters(UNet(_config()))
    assert count_parameters(UNet(_config(base_channels = 8))) > count_parameters(UNet(_config()))


def test_attention_is_permutation_equivariant():
    block           = AttnBlock(4, norm_groups = 4).double()
    xavier_init(block)

    x               = torch.randn((1, 4, 4, 4), dtype = torch.float64)
    perm            = torch.randperm(16, generator = torch.Generator().manual_seed(0))
    permuted        = x.reshape(1, 4, 16)[:, :, perm].reshape(1, 4, 4, 4)

    with torch.no_grad():
        expected    = block(x).reshape(1, 4, 16)[:, :, perm].reshape(1, 4, 4, 4)
        result      = block(permuted)

    torch.testing.assert_close(result, expected)


def test_resblock_shortcut_changes_width():
    block = ResBlock(4, 8, 16, norm_groups = 4)

    assert isinstance(block.shortcut, nn.Conv2d)
    assert block(torch.randn((2, 4, 8, 8)), torch.randn((2, 16))).shape == (2, 8, 8, 8)


def test_gradient_matches_finite_differences():
    unet     = _live_unet(dtype = torch.float64)
    x        = torch.randn((1, 1, 32, 32), dtype = torch.float64)
    emb      = torch.randn((1, 16), dtype = torch.float64)
    weights  = torch.randn((1, 1, 32, 32), dtype = torch.float64)

    def objective():
        eps, v_raw = unet(x, emb)

        return (weights * (eps + 0.5 * v_raw)).sum()

    target   = unet.head.weight
    grad,    = torch.autograd.grad(objective(), [target])

    h        = 1e-6
    with torch.no_grad():
        target[0, 0, 1, 1] += h
        upper               = float(objective())
        target[0, 0, 1, 1] -= 2 * h
        lower               = float(objective())
        target[0, 0, 1, 1] += h

    assert float(grad[0, 0, 1, 1]) == pytest.approx((upper - lower) / (2 * h), rel = 1e-4, abs = 1e-8)


# -------------------------
# CONDITIONAL WRAPPER
# -------------------------

def test_encoder_width_must_match():
    with pytest.raises(ContractError):
        ConditionalDenoiser(UNet(_config()), CurveEncoder(13, 32))


def test_step_tensor_shape_is_checked():
    model = build_denoiser(_config().to_settings())

    with pytest.raises(ContractError):
        model(torch.zeros((2, 1, 32, 32)), torch.ones((2, 1), dtype = torch.long), None)


def test_missing_contexts_give_time_embedding():
    model = build_denoiser(_config().to_settings())
    t     = torch.tensor([3, 9])

    torch.testing.assert_close(model.embed(t, None), model.unet.time_embedding(t))
    torch.testing.assert_close(model.embed(t, ContextBundle()), model.unet.time_embedding(t))


def test_dropped_contexts_give_time_embedding():
    model    = build_denoiser({**_config().to_settings(), "use_topology" : True})
    t        = torch.tensor([3, 9])
    dropped  = torch.zeros(2, dtype = torch.bool)
    contexts = ContextBundle(curves = torch.rand((2, 13)), topology = torch.rand((2, 1, 28, 28))).with_masks(dropped, dropped)

    torch.testing.assert_close(model.embed(t, contexts), model.unet.time_embedding(t))


def test_settings_rebuild_same_architecture():
    model    = build_denoiser({**_config().to_settings(), "use_topology" : True})
    rebuilt  = build_denoiser(model.to_settings())

    assert rebuilt.to_settings() == model.to_settings()
    assert count_parameters(rebuilt) == count_parameters(model)
    rebuilt.load_state_dict(model.state_dict())
