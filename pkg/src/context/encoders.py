# BEHAVIOR AND TOPOLOGY CONTEXT EMBEDDINGS

# DEPENDENCIES

import torch
import torch.nn as nn
import torch.nn.init as init
from dataclasses import replace
from dataclasses import dataclass

from config.config import IMAGE_SIZE
from config.config import NUM_LOAD_STEPS
from config.config import EMBEDDING_WIDTH
from src.utils.exceptions import ContractError
from src.utils.exceptions import ConfigurationError


def xavier_init(module : nn.Module) -> None:
    """ Glorot-uniform weights and zero biases on every linear and convolutional layer. """
    for layer in module.modules():
        if isinstance(layer, (nn.Linear, nn.Conv2d)):
            init.xavier_uniform_(layer.weight)

            if layer.bias is not None:
                init.zeros_(layer.bias)


class CurveEncoder(nn.Module):
    """
    Behavior context: a normalized energy curve mapped through two dense layers (SiLU, then linear).
    """

    def __init__(self, curve_length : int = NUM_LOAD_STEPS, width : int = EMBEDDING_WIDTH) -> None:
        super().__init__()

        self.curve_length = curve_length
        self.width        = width
        self.net          = nn.Sequential(nn.Linear(curve_length, width),
                                          nn.SiLU(),
                                          nn.Linear(width, width),
                                          )

        xavier_init(self)

    def forward(self, psi : torch.Tensor) -> torch.Tensor:
        if psi.ndim != 2 or psi.shape[1] != self.curve_length:
            raise ContractError(f"curve encoder expects (batch, {self.curve_length}), got {tuple(psi.shape)}")

        return self.net(psi)


class TopologyEncoder(nn.Module):
    """
    Topology context: a grayscale bitmap in [0, 1] through two conv + max-pool stages and three dense
    layers (ReLU, ReLU, linear).
    """

    def __init__(self, width : int = EMBEDDING_WIDTH, image_size : int = IMAGE_SIZE, channels : int = 16) -> None:
        super().__init__()

        if image_size % 4:
            raise ConfigurationError(f"topology images must be divisible by 4, got {image_size}")

        self.image_size    = image_size
        self.width         = width
        self.flatten_width = channels * (image_size // 4) ** 2

        self.features      = nn.Sequential(nn.Conv2d(1, channels, kernel_size = 3, stride = 1, padding = 1),
                                           nn.ReLU(),
                                           nn.MaxPool2d(2),
                                           nn.Conv2d(channels, channels, kernel_size = 3, stride = 1, padding = 1),
                                           nn.ReLU(),
                                           nn.MaxPool2d(2),
                                           nn.Flatten(),
                                           )
        self.head          = nn.Sequential(nn.Linear(self.flatten_width, width),
                                           nn.ReLU(),
                                           nn.Linear(width, width),
                                           nn.ReLU(),
                                           nn.Linear(width, width),
                                           )

        xavier_init(self)

    def forward(self, image : torch.Tensor) -> torch.Tensor:
        if image.ndim == 3:
            image = image.unsqueeze(1)

        if tuple(image.shape[1:]) != (1, self.image_size, self.image_size):
            raise ContractError(f"topology encoder expects (batch, 1, {self.image_size}, {self.image_size}), got {tuple(image.shape)}")

        return self.head(self.features(image))


@dataclass
class ContextBundle:
    """
    Conditioning inputs for a batch.

    `curves` is (B, 13) normalized energies, `topology` is (B, 1, 28, 28) in [0, 1]. The keep masks
    are (B,) booleans; a missing mask keeps every row.
    """
    curves        : torch.Tensor | None = None
    topology      : torch.Tensor | None = None
    keep_curve    : torch.Tensor | None = None
    keep_topology : torch.Tensor | None = None

    @property
    def batch_size(self) -> int | None:
        for tensor in (self.curves, self.topology):
            if tensor is not None:
                return int(tensor.shape[0])

        return None

    @property
    def is_empty(self) -> bool:
        return self.curves is None and self.topology is None

    def to(self, device : str | torch.device, dtype : torch.dtype | None = None) -> "ContextBundle":
        def move(tensor, floating):
            if tensor is None:
                return None

            return tensor.to(device = device, dtype = dtype) if floating and dtype is not None else tensor.to(device)

        return ContextBundle(curves        = move(self.curves, True),
                             topology      = move(self.topology, True),
                             keep_curve    = move(self.keep_curve, False),
                             keep_topology = move(self.keep_topology, False),
                             )

    def select(self, index : torch.Tensor) -> "ContextBundle":
        """ Rows picked by an index tensor (masks are dropped). """
        return ContextBundle(curves   = None if self.curves is None else self.curves[index],
                             topology = None if self.topology is None else self.topology[index],
                             )

    def for_batch(self, n : int) -> "ContextBundle":
        """
        Repeat a single-row bundle to n rows; a bundle that already has n rows is returned as is.
        """
        rows = self.batch_size

        if rows is None or rows == n:
            return self

        if rows != 1:
            raise ContractError(f"cannot broadcast a {rows}-row context bundle to {n} rows")

        return ContextBundle(curves   = None if self.curves is None else self.curves.expand(n, -1).contiguous(),
                             topology = None if self.topology is None else self.topology.expand(n, -1, -1, -1).contiguous(),
                             )

    def with_masks(self, keep_curve : torch.Tensor | None, keep_topology : torch.Tensor | None) -> "ContextBundle":
        return replace(self, keep_curve = keep_curve, keep_topology = keep_topology)


def context_keep_masks(batch : int, drop_prob : float, generator : torch.Generator | None = None, independent : bool = False) -> tuple:
    """
    Per-row keep masks for training-time context dropping.

    One Bernoulli(drop_prob) event per row drops every context together; with `independent` each
    context kind gets its own event.

    Returns:

        - `(keep_curve, keep_topology)`       {tuple}       : Boolean (batch,) tensors.
    """
    if not 0.0 <= drop_prob <= 1.0:
        raise ConfigurationError(f"drop probability must lie in [0, 1], got {drop_prob}")

    keep_curve        = torch.rand(batch, generator = generator) >= drop_prob

    if independent:
        keep_topology = torch.rand(batch, generator = generator) >= drop_prob

    else:
        keep_topology = keep_curve.clone()

    return keep_curve, keep_topology


def combine(time_emb : torch.Tensor, behavior : torch.Tensor | None = None, topology : torch.Tensor | None = None,
            keep_behavior : torch.Tensor | None = None, keep_topology : torch.Tensor | None = None) -> torch.Tensor:
    """
    zeta_emb = zeta_t + zeta_behavior + zeta_topology; dropped rows contribute nothing.
    """
    zeta = time_emb

    for embedding, keep in ((behavior, keep_behavior), (topology, keep_topology)):
        if embedding is None:
            continue

        if embedding.shape != time_emb.shape:
            raise ContractError(f"context embedding {tuple(embedding.shape)} does not match time embedding {tuple(time_emb.shape)}")

        if keep is not None:
            embedding = embedding * keep.to(device = embedding.device, dtype = embedding.dtype).unsqueeze(1)

        zeta = zeta + embedding

    return zeta
