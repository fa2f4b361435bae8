# PIXEL-RANGE CONVERSIONS AND IMAGE FILE OUTPUT

# DEPENDENCIES

import torch
import numpy as np
import torch.nn.functional as F
from PIL import Image
from pathlib import Path

from config.config import IMAGE_SIZE
from config.config import PADDED_SIZE
from src.utils.exceptions import ContractError


def to_model_range(images : np.ndarray | torch.Tensor, dtype : torch.dtype = torch.float32) -> torch.Tensor:
    """
    Map grayscale [0, 255] to [-1, 1] and add a channel axis: (N, H, W) -> (N, 1, H, W).
    """
    tensor = torch.as_tensor(np.asarray(images), dtype = dtype)

    if tensor.ndim == 3:
        tensor = tensor.unsqueeze(1)

    return tensor / 127.5 - 1.0


def to_unit_range(images : np.ndarray | torch.Tensor, dtype : torch.dtype = torch.float32) -> torch.Tensor:
    """ Map grayscale [0, 255] to [0, 1], adding a channel axis. """
    tensor = torch.as_tensor(np.asarray(images), dtype = dtype)

    if tensor.ndim == 3:
        tensor = tensor.unsqueeze(1)

    return tensor / 255.0


def to_pixel_range(x : torch.Tensor) -> np.ndarray:
    """
    Clamp to [-1, 1] and map back to uint8 [0, 255]; the channel axis is dropped.
    """
    x      = x.detach().clamp(-1.0, 1.0)
    pixels = torch.round((x + 1.0) * 127.5).to(torch.uint8).cpu().numpy()

    return pixels[:, 0] if pixels.ndim == 4 else pixels


def pad_to_canvas(x : torch.Tensor, canvas : int = PADDED_SIZE, value : float = -1.0) -> torch.Tensor:
    """
    Centre an (N, C, H, W) batch on a square canvas, filling with `value` (-1 is the softest material).
    """
    height, width  = x.shape[-2:]
    extra          = canvas - height

    if height != width or extra < 0 or extra % 2:
        raise ContractError(f"cannot pad a {height}x{width} image onto a {canvas}x{canvas} canvas")

    half           = extra // 2

    return F.pad(x, (half, half, half, half), value = value)


def crop_from_canvas(x : torch.Tensor, size : int = IMAGE_SIZE) -> torch.Tensor:
    canvas         = x.shape[-1]
    half           = (canvas - size) // 2

    if half < 0:
        raise ContractError(f"cannot crop {size}x{size} from a {canvas}x{canvas} canvas")

    return x[..., half:half + size, half:half + size]


def save_image(path : str | Path, pixels : np.ndarray) -> Path:
    """
    Write one uint8 grayscale image. The format follows the suffix: `.pgm` gives binary PGM (P5,
    maxval 255), `.png` gives PNG.
    """
    path   = Path(path)
    Image.fromarray(np.asarray(pixels, dtype = np.uint8)).save(path)

    return path


def image_grid(images : np.ndarray, columns : int = 8, gap : int = 2) -> np.ndarray:
    """
    Tile (N, H, W) uint8 images into one grid with black gutters.
    """
    images            = np.asarray(images, dtype = np.uint8)
    count, h, w       = images.shape
    columns           = max(1, min(columns, count))
    rows              = -(-count // columns)
    grid              = np.zeros((rows * (h + gap) - gap, columns * (w + gap) - gap), dtype = np.uint8)

    for index, image in enumerate(images):
        r, c          = divmod(index, columns)
        grid[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = image

    return grid
