# CONTEXT-CONDITIONED DENOISER

# DEPENDENCIES

import torch
import torch.nn as nn

from config.config import IMAGE_SIZE
from config.config import NUM_LOAD_STEPS
from src.denoiser.unet import UNet
from src.denoiser.unet import DenoiserConfig
from src.context.encoders import combine
from src.context.encoders import CurveEncoder
from src.context.encoders import ContextBundle
from src.context.encoders import TopologyEncoder
from src.utils.exceptions import ContractError


class ConditionalDenoiser(nn.Module):
    """
    U-Net plus optional behavior and topology encoders, called as model(x_t, t, contexts).

    The embedding fed to the U-Net is the time embedding plus every present, kept context
    embedding. `contexts=None` gives the unconditional prediction.
    """

    def __init__(self, unet : UNet, curve_encoder : CurveEncoder | None = None, topology_encoder : TopologyEncoder | None = None) -> None:
        super().__init__()

        width                 = unet.config.embedding_width

        for encoder in (curve_encoder, topology_encoder):
            if encoder is not None and encoder.width != width:
                raise ContractError(f"context encoder width {encoder.width} does not match the denoiser's {width}")

        self.unet             = unet
        self.curve_encoder    = curve_encoder
        self.topology_encoder = topology_encoder

    def embed(self, t : torch.Tensor, contexts : ContextBundle | None = None) -> torch.Tensor:
        time_emb = self.unet.time_embedding(t)

        if contexts is None or contexts.is_empty:
            return time_emb

        behavior = None
        topology = None

        if self.curve_encoder is not None and contexts.curves is not None:
            behavior = self.curve_encoder(contexts.curves.to(time_emb.dtype))

        if self.topology_encoder is not None and contexts.topology is not None:
            topology = self.topology_encoder(contexts.topology.to(time_emb.dtype))

        return combine(time_emb, behavior, topology, contexts.keep_curve, contexts.keep_topology)

    def forward(self, x_t : torch.Tensor, t : torch.Tensor, contexts : ContextBundle | None = None) -> tuple:
        if t.shape != (x_t.shape[0],):
            raise ContractError(f"step tensor must be ({x_t.shape[0]},), got {tuple(t.shape)}")

        return self.unet(x_t, self.embed(t, contexts))

    def to_settings(self) -> dict:
        settings                     = self.unet.config.to_settings()
        settings["use_curve"]        = self.curve_encoder is not None
        settings["use_topology"]     = self.topology_encoder is not None
        settings["curve_length"]     = self.curve_encoder.curve_length if self.curve_encoder is not None else NUM_LOAD_STEPS
        settings["topology_size"]    = self.topology_encoder.image_size if self.topology_encoder is not None else IMAGE_SIZE

        return settings


def build_denoiser(settings : dict | None = None) -> ConditionalDenoiser:
    """
    Assemble a denoiser from flat settings (a `DenoiserConfig` plus `use_curve`, `use_topology`,
    `curve_length` and `topology_size`).
    """
    settings  = dict(settings or {})
    config    = DenoiserConfig.from_settings(settings)
    width     = config.embedding_width

    curve     = CurveEncoder(int(settings.get("curve_length", NUM_LOAD_STEPS)), width) if settings.get("use_curve", True) else None
    topology  = TopologyEncoder(width, int(settings.get("topology_size", IMAGE_SIZE))) if settings.get("use_topology", False) else None

    return ConditionalDenoiser(UNet(config), curve, topology)
