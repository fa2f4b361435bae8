# IDX CONTAINER INGESTION AND BITMAP TYPE

# DEPENDENCIES

import gzip
import struct
import numpy as np
from pathlib import Path
from PIL import Image
from dataclasses import dataclass

from logger.logger import LoggerSetup
from src.utils.exceptions import InputPathError
from src.utils.exceptions import DataFormatError

# LOGGER SETUP
idx_logger = LoggerSetup(logger_name = "idx_reader.py", log_filename_prefix = "idx_reader").get_logger()

# MAGIC NUMBER OF AN UNSIGNED-BYTE 3-D TENSOR: 0x00 0x00 <dtype 0x08> <ndim 0x03>
IDX_UBYTE_3D_MAGIC  = 0x00000803
HEADER_BYTES        = 16


@dataclass(frozen = True)
class Bitmap:
    """
    A square grayscale bitmap with integer values in [0, 255].
    """
    values : np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)

        if values.ndim != 2:
            raise DataFormatError(f"bitmap must be 2-D, got shape {values.shape}")

        if values.size and (values.min() < 0 or values.max() > 255):
            raise DataFormatError("bitmap values must lie in [0, 255]")

        object.__setattr__(self, "values", values.astype(np.uint8))

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    def scaled(self) -> np.ndarray:
        """ Values mapped to [0, 1] as float64. """
        return self.values.astype(np.float64) / 255.0


def _read_bytes(path : Path) -> bytes:
    if not path.is_file():
        raise InputPathError(f"IDX file not found: {path}")

    if path.suffix == ".gz":
        with gzip.open(path, "rb") as handle:
            return handle.read()

    return path.read_bytes()


def load_idx(path : str | Path) -> np.ndarray:
    """
    Load an MNIST-format IDX image file.

    The header is four big-endian 32-bit integers: magic, count, rows, cols. The payload is
    count*rows*cols unsigned bytes in row-major order. Files ending in `.gz` are decompressed.

    Arguments:

        - `path`          {str | Path}      : Location of the IDX file.

    Returns:

        - `images`         {np.ndarray}     : uint8 array of shape (count, rows, cols); wrap a row in
                                              `Bitmap` when a validated single image is needed.

    Raises:

        - `DataFormatError`                 : Bad magic, non-square images, truncated or oversized
                                              payload. The byte offset of the problem is reported.
    """
    path                        = Path(path)
    raw                         = _read_bytes(path)

    try:

        if len(raw) < HEADER_BYTES:
            raise DataFormatError(f"truncated IDX header in {path.name}", offset = len(raw))

        magic, count, rows, cols = struct.unpack(">IIII", raw[:HEADER_BYTES])

        if magic != IDX_UBYTE_3D_MAGIC:
            raise DataFormatError(f"bad IDX magic 0x{magic:08x} in {path.name}, expected 0x{IDX_UBYTE_3D_MAGIC:08x}", offset = 0)

        if rows != cols:
            raise DataFormatError(f"non-square images {rows}x{cols} in {path.name}", offset = 8)

        expected                = count * rows * cols
        payload                 = raw[HEADER_BYTES:]

        if len(payload) < expected:
            raise DataFormatError(f"truncated IDX payload in {path.name}: {len(payload)} of {expected} bytes", offset = len(raw))

        if len(payload) > expected:
            raise DataFormatError(f"{len(payload) - expected} trailing bytes in {path.name}", offset = HEADER_BYTES + expected)

        images                  = np.frombuffer(payload, dtype = np.uint8).reshape(count, rows, cols).copy()

        idx_logger.info(f"Loaded {count} bitmaps of {rows}x{cols} from {path}")

        return images

    except DataFormatError as e:
        idx_logger.error(f"Error reading IDX file: {repr(e)}")

        raise


def write_idx(path : str | Path, images : np.ndarray) -> Path:
    """
    Write a stack of bitmaps as an unsigned-byte 3-D IDX file (gzip when the name ends in `.gz`).
    """
    path                        = Path(path)
    images                      = np.asarray(images)

    if images.ndim != 3:
        raise DataFormatError(f"expected a (count, rows, cols) stack, got shape {images.shape}")

    header                      = struct.pack(">IIII", IDX_UBYTE_3D_MAGIC, *images.shape)
    blob                        = header + np.ascontiguousarray(images, dtype = np.uint8).tobytes()

    if path.suffix == ".gz":
        with gzip.open(path, "wb") as handle:
            handle.write(blob)

    else:
        path.write_bytes(blob)

    idx_logger.info(f"Wrote {images.shape[0]} bitmaps to {path}")

    return path


def load_image(path : str | Path, size : int = 28) -> Bitmap:
    """
    Read any grayscale-convertible image file (PGM, PNG, ...) as a `size`x`size` bitmap.
    """
    path                        = Path(path)

    if not path.is_file():
        raise InputPathError(f"image file not found: {path}")

    with Image.open(path) as image:
        values                  = np.array(image.convert("L"), dtype = np.uint8)

    if values.shape != (size, size):
        raise DataFormatError(f"{path.name} is {values.shape[1]}x{values.shape[0]}, expected {size}x{size}")

    return Bitmap(values)
