# CNN SURROGATE FOR ENERGY-CURVE PREDICTION

# DEPENDENCIES

import torch
import numpy as np
import torch.nn as nn
from dataclasses import asdict
from dataclasses import dataclass

from config.config import IMAGE_SIZE
from config.config import NUM_LOAD_STEPS
from src.mnist_data.curves import EnergyCurve
from src.mnist_data.curves import canonical_displacements
from src.mnist_data.idx_reader import Bitmap
from src.context.encoders import xavier_init
from src.utils.image_io import to_unit_range
from src.utils.exceptions import ContractError


@dataclass(frozen = True)
class SurrogateConfig:
    image_size   : int   = IMAGE_SIZE
    channels     : int   = 16
    dense_widths : tuple = (120, 84)
    outputs      : int   = NUM_LOAD_STEPS

    def __post_init__(self) -> None:
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))

    @property
    def flatten_width(self) -> int:
        return self.channels * (self.image_size // 4) ** 2

    def to_settings(self) -> dict:
        settings                 = asdict(self)
        settings["dense_widths"] = list(self.dense_widths)

        return settings

    @classmethod
    def from_settings(cls, settings : dict) -> "SurrogateConfig":
        names = cls.__dataclass_fields__.keys()

        return cls(**{key : value for key, value in settings.items() if key in names})


class SurrogateCNN(nn.Module):
    """
    conv(16) -> pool -> conv(16) -> pool -> dense(120) -> dense(84) -> dense(13), ReLU on hidden layers.

    Inputs are (B, 1, 28, 28) grayscale in [0, 1]; outputs are normalized curves (B, 13).
    """

    def __init__(self, config : SurrogateConfig | None = None) -> None:
        super().__init__()

        self.config   = config if config is not None else SurrogateConfig()
        channels      = self.config.channels
        widths        = (self.config.flatten_width, *self.config.dense_widths)

        self.features = nn.Sequential(nn.Conv2d(1, channels, kernel_size = 3, stride = 1, padding = 1),
                                      nn.ReLU(),
                                      nn.MaxPool2d(2),
                                      nn.Conv2d(channels, channels, kernel_size = 3, stride = 1, padding = 1),
                                      nn.ReLU(),
                                      nn.MaxPool2d(2),
                                      nn.Flatten(),
                                      )

        layers        = []

        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            layers   += [nn.Linear(fan_in, fan_out), nn.ReLU()]

        layers.append(nn.Linear(widths[-1], self.config.outputs))

        self.head     = nn.Sequential(*layers)

        xavier_init(self)

    def forward(self, x : torch.Tensor) -> torch.Tensor:
        size = self.config.image_size

        if x.ndim != 4 or tuple(x.shape[1:]) != (1, size, size):
            raise ContractError(f"surrogate expects (batch, 1, {size}, {size}), got {tuple(x.shape)}")

        return self.head(self.features(x))

    def predict_batch(self, images : np.ndarray, batch_size : int = 256) -> np.ndarray:
        """
        Predicted normalized curves for (N, 28, 28) uint8 bitmaps, as a float64 (N, 13) array.
        """
        images       = np.asarray(images)

        if images.ndim != 3:
            raise ContractError(f"expected a (count, rows, cols) stack, got shape {images.shape}")

        parameter    = next(self.parameters())
        outputs      = []
        was_training = self.training

        self.eval()

        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                chunk = to_unit_range(images[start:start + batch_size], dtype = parameter.dtype).to(parameter.device)
                outputs.append(self(chunk).cpu().double().numpy())

        self.train(was_training)

        if not outputs:
            return np.zeros((0, self.config.outputs))

        return np.concatenate(outputs)

    def predict_curve(self, bitmap : Bitmap) -> EnergyCurve:
        """ Normalized curve for one bitmap, paired with the canonical displacement schedule. """
        energies = self.predict_batch(bitmap.values[None])[0]

        return EnergyCurve(canonical_displacements(energies.size), energies, normalized = True)


def _energies(curve : EnergyCurve | np.ndarray) -> np.ndarray:
    values = curve.energies if isinstance(curve, EnergyCurve) else np.asarray(curve, dtype = np.float64)

    if values.ndim != 1:
        raise ContractError(f"a curve must be one-dimensional, got shape {values.shape}")

    return values


def mse(pred : EnergyCurve | np.ndarray, target : EnergyCurve | np.ndarray) -> float:
    """
    Mean squared difference between two curves of equal length.
    """
    a = _energies(pred)
    b = _energies(target)

    if a.size != b.size:
        raise ContractError(f"curve lengths differ: {a.size} vs {b.size}")

    return float(np.mean((a - b) ** 2))


def mse_to_target(predictions : np.ndarray, target : EnergyCurve | np.ndarray) -> np.ndarray:
    """ Row-wise MSE of an (N, 13) prediction block against one target curve. """
    predictions = np.asarray(predictions, dtype = np.float64)
    target      = _energies(target)

    if predictions.ndim != 2 or predictions.shape[1] != target.size:
        raise ContractError(f"predictions {predictions.shape} do not match a target of length {target.size}")

    return np.mean((predictions - target[None, :]) ** 2, axis = 1)
