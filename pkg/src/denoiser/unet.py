# U-NET NOISE AND VARIANCE PREDICTOR

# DEPENDENCIES

import math
import torch
import torch.nn as nn
import torch.nn.init as init
import torch.nn.functional as F
from dataclasses import asdict
from dataclasses import dataclass

from config.config import PADDED_SIZE
from config.config import BASE_CHANNELS
from config.config import EMBEDDING_WIDTH
from config.config import CHANNEL_MULTIPLIERS
from config.config import ATTENTION_RESOLUTIONS
from src.context.encoders import xavier_init
from src.utils.exceptions import ContractError
from src.utils.exceptions import ConfigurationError


@dataclass(frozen = True)
class DenoiserConfig:
    """
    Shape-defining settings of the U-Net.

    `attention_resolutions` are grid sizes on the padded canvas. The default (16, 8, 4) puts attention
    at the three coarsest grids; (32, 16, 8) moves it up by one level.
    """
    base_channels         : int   = BASE_CHANNELS
    channel_multipliers   : tuple = CHANNEL_MULTIPLIERS
    num_res_blocks        : int   = 1
    attention_resolutions : tuple = ATTENTION_RESOLUTIONS
    embedding_width       : int   = EMBEDDING_WIDTH
    canvas                : int   = PADDED_SIZE
    norm_groups           : int   = 32
    dropout               : float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        object.__setattr__(self, "attention_resolutions", tuple(int(r) for r in self.attention_resolutions))

        if not self.channel_multipliers:
            raise ConfigurationError("at least one channel multiplier is required")

        if self.canvas % 2 ** (len(self.channel_multipliers) - 1):
            raise ConfigurationError(f"canvas {self.canvas} cannot be halved {len(self.channel_multipliers) - 1} times")

        if self.embedding_width % 2:
            raise ConfigurationError(f"embedding width must be even, got {self.embedding_width}")

        if self.num_res_blocks < 1 or self.base_channels < 1:
            raise ConfigurationError("base_channels and num_res_blocks must be positive")

    @property
    def resolutions(self) -> tuple:
        """ Grid size at each level, finest first. """
        return tuple(self.canvas // 2 ** level for level in range(len(self.channel_multipliers)))

    def to_settings(self) -> dict:
        settings = asdict(self)

        settings["channel_multipliers"]   = list(self.channel_multipliers)
        settings["attention_resolutions"] = list(self.attention_resolutions)

        return settings

    @classmethod
    def from_settings(cls, settings : dict) -> "DenoiserConfig":
        names = cls.__dataclass_fields__.keys()

        return cls(**{key : value for key, value in settings.items() if key in names})


def group_norm(channels : int, groups : int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


def sinusoidal_encoding(t : torch.Tensor, dim : int) -> torch.Tensor:
    """
    Transformer-style position encoding of integer steps: (B,) -> (B, dim), sines then cosines.
    """
    half      = dim // 2
    frequency = torch.exp(-math.log(10000.0) * torch.arange(half, dtype = torch.float64, device = t.device) / half)
    angles    = t.to(torch.float64)[:, None] * frequency[None, :]

    return torch.cat([torch.sin(angles), torch.cos(angles)], dim = 1)


class TimeEmbedding(nn.Module):
    """ Sinusoidal step encoding -> dense(SiLU) -> dense(linear). """

    def __init__(self, width : int = EMBEDDING_WIDTH) -> None:
        super().__init__()

        self.width = width
        self.net   = nn.Sequential(nn.Linear(width, width),
                                   nn.SiLU(),
                                   nn.Linear(width, width),
                                   )

    def forward(self, t : torch.Tensor) -> torch.Tensor:
        encoding = sinusoidal_encoding(t, self.width).to(self.net[0].weight.dtype)

        return self.net(encoding)


class DownSample(nn.Module):

    def __init__(self, channels : int) -> None:
        super().__init__()

        self.down = nn.Conv2d(channels, channels, 3, stride = 2, padding = 1)

    def forward(self, x : torch.Tensor, emb : torch.Tensor) -> torch.Tensor:
        return self.down(x)


class UpSample(nn.Module):

    def __init__(self, channels : int) -> None:
        super().__init__()

        self.up = nn.Conv2d(channels, channels, 3, stride = 1, padding = 1)

    def forward(self, x : torch.Tensor, emb : torch.Tensor) -> torch.Tensor:
        return self.up(F.interpolate(x, scale_factor = 2, mode = "nearest"))


class AttnBlock(nn.Module):
    """
    Single-head spatial self-attention with a residual connection.
    """

    def __init__(self, channels : int, norm_groups : int = 32) -> None:
        super().__init__()

        self.norm   = group_norm(channels, norm_groups)
        self.proj_q = nn.Conv2d(channels, channels, 1)
        self.proj_k = nn.Conv2d(channels, channels, 1)
        self.proj_v = nn.Conv2d(channels, channels, 1)
        self.proj   = nn.Conv2d(channels, channels, 1)

    def forward(self, x : torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        h          = self.norm(x)

        q          = self.proj_q(h).permute(0, 2, 3, 1).reshape(B, H * W, C)
        k          = self.proj_k(h).reshape(B, C, H * W)
        v          = self.proj_v(h).permute(0, 2, 3, 1).reshape(B, H * W, C)

        weights    = torch.softmax(torch.bmm(q, k) * C ** -0.5, dim = -1)
        h          = torch.bmm(weights, v).reshape(B, H, W, C).permute(0, 3, 1, 2)

        return x + self.proj(h)


class ResBlock(nn.Module):
    """
    GroupNorm -> SiLU -> conv, plus the projected embedding, then GroupNorm -> SiLU -> dropout -> conv,
    with a 1x1 shortcut when the width changes and optional attention on the output.
    """

    def __init__(self, in_ch : int, out_ch : int, emb_width : int, dropout : float = 0.0, attn : bool = False, norm_groups : int = 32) -> None:
        super().__init__()

        self.block1   = nn.Sequential(group_norm(in_ch, norm_groups),
                                      nn.SiLU(),
                                      nn.Conv2d(in_ch, out_ch, 3, stride = 1, padding = 1),
                                      )
        self.emb_proj = nn.Sequential(nn.SiLU(),
                                      nn.Linear(emb_width, out_ch),
                                      )
        self.block2   = nn.Sequential(group_norm(out_ch, norm_groups),
                                      nn.SiLU(),
                                      nn.Dropout(dropout),
                                      nn.Conv2d(out_ch, out_ch, 3, stride = 1, padding = 1),
                                      )
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.attn     = AttnBlock(out_ch, norm_groups) if attn else nn.Identity()

    def forward(self, x : torch.Tensor, emb : torch.Tensor) -> torch.Tensor:
        h = self.block1(x)
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.block2(h)

        return self.attn(h + self.shortcut(x))


class UNet(nn.Module):
    """
    Encoder-decoder over a padded single-channel canvas.

    Input (B, 1, canvas, canvas) plus an embedding (B, width); output is the noise prediction and
    the raw variance channel, each (B, 1, canvas, canvas).
    """

    def __init__(self, config : DenoiserConfig | None = None) -> None:
        super().__init__()

        config              = config if config is not None else DenoiserConfig()
        self.config         = config
        ch                  = config.base_channels
        width               = config.embedding_width
        groups              = config.norm_groups
        resolutions         = config.resolutions

        self.time_embedding = TimeEmbedding(width)
        self.head           = nn.Conv2d(1, ch, 3, stride = 1, padding = 1)

        self.downblocks     = nn.ModuleList()
        skips               = [ch]
        now_ch              = ch

        for level, mult in enumerate(config.channel_multipliers):
            out_ch          = ch * mult
            attn            = resolutions[level] in config.attention_resolutions

            for _ in range(config.num_res_blocks):
                self.downblocks.append(ResBlock(now_ch, out_ch, width, config.dropout, attn, groups))
                now_ch      = out_ch
                skips.append(now_ch)

            if level != len(config.channel_multipliers) - 1:
                self.downblocks.append(DownSample(now_ch))
                skips.append(now_ch)

        bottleneck_attn     = resolutions[-1] in config.attention_resolutions
        self.middleblocks   = nn.ModuleList([ResBlock(now_ch, now_ch, width, config.dropout, bottleneck_attn, groups),
                                             ResBlock(now_ch, now_ch, width, config.dropout, False, groups),
                                             ])

        self.upblocks       = nn.ModuleList()

        for level, mult in reversed(list(enumerate(config.channel_multipliers))):
            out_ch          = ch * mult
            attn            = resolutions[level] in config.attention_resolutions

            for _ in range(config.num_res_blocks + 1):
                self.upblocks.append(ResBlock(skips.pop() + now_ch, out_ch, width, config.dropout, attn, groups))
                now_ch      = out_ch

            if level != 0:
                self.upblocks.append(UpSample(now_ch))

        self.tail           = nn.Sequential(group_norm(now_ch, groups),
                                            nn.SiLU(),
                                            nn.Conv2d(now_ch, 2, 3, stride = 1, padding = 1),
                                            )

        xavier_init(self)
        init.zeros_(self.tail[-1].weight)
        init.zeros_(self.tail[-1].bias)

    def forward(self, x : torch.Tensor, zeta_emb : torch.Tensor) -> tuple:
        canvas = self.config.canvas

        if x.ndim != 4 or tuple(x.shape[1:]) != (1, canvas, canvas):
            raise ContractError(f"denoiser expects (batch, 1, {canvas}, {canvas}), got {tuple(x.shape)}")

        if zeta_emb.shape != (x.shape[0], self.config.embedding_width):
            raise ContractError(f"embedding must be ({x.shape[0]}, {self.config.embedding_width}), got {tuple(zeta_emb.shape)}")

        h      = self.head(x)
        hs     = [h]

        for layer in self.downblocks:
            h  = layer(h, zeta_emb)
            hs.append(h)

        for layer in self.middleblocks:
            h  = layer(h, zeta_emb)

        for layer in self.upblocks:
            if isinstance(layer, ResBlock):
                h = torch.cat([h, hs.pop()], dim = 1)

            h  = layer(h, zeta_emb)

        out    = self.tail(h)

        return out[:, :1], out[:, 1:]


def count_parameters(model : nn.Module) -> int:
    return sum(parameter.numel() for parameter in model.parameters())
