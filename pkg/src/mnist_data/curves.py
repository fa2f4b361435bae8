# ENERGY CURVES, NORMALIZATION AND DATASET MANIFEST

# DEPENDENCIES

import numpy as np
import pandas as pd
from pathlib import Path
from dataclasses import field
from dataclasses import dataclass

from config.config import POISSON_RATIO
from config.config import NUM_LOAD_STEPS
from config.config import MAX_DISPLACEMENT
from config.config import format_config
from config.config import load_config_file
from logger.logger import LoggerSetup
from src.utils.exceptions import ContractError
from src.utils.exceptions import InputPathError
from src.utils.exceptions import DataFormatError
from src.utils.exceptions import ConfigurationError

# LOGGER SETUP
curves_logger = LoggerSetup(logger_name = "curves.py", log_filename_prefix = "curves").get_logger()


@dataclass(frozen = True)
class EnergyCurve:
    """
    Total strain energy at each applied displacement of a uniaxial extension test.

    `displacements` are in length units (1 pixel = 1 unit) and start at 0. `energies` are raw
    FEM energies unless `normalized` is set, in which case they were divided by the dataset
    constant S. Surrogate predictions are also carried as curves and may be slightly negative.
    """
    displacements : np.ndarray
    energies      : np.ndarray
    normalized    : bool = True

    def __post_init__(self) -> None:
        displacements = np.asarray(self.displacements, dtype = np.float64)
        energies      = np.asarray(self.energies, dtype = np.float64)

        if displacements.ndim != 1 or energies.shape != displacements.shape:
            raise ContractError(f"curve needs matching 1-D arrays, got {displacements.shape} and {energies.shape}")

        if displacements.size < 2 or displacements[0] != 0.0 or np.any(np.diff(displacements) <= 0.0):
            raise ContractError("curve displacements must start at 0 and increase strictly")

        object.__setattr__(self, "displacements", displacements)
        object.__setattr__(self, "energies", energies)

    def __len__(self) -> int:
        return int(self.energies.size)

    @property
    def abscissa(self) -> np.ndarray:
        """ Displacements divided by their maximum, in [0, 1]. """
        return self.displacements / self.displacements[-1]

    def normalize(self, scale : float) -> "EnergyCurve":
        if self.normalized:
            raise ContractError("curve is already normalized")

        if not scale > 0.0:
            raise ConfigurationError(f"normalization constant must be positive, got {scale}")

        return EnergyCurve(self.displacements, self.energies / scale, normalized = True)


def canonical_displacements(steps : int = NUM_LOAD_STEPS, max_displacement : float = MAX_DISPLACEMENT) -> np.ndarray:
    """
    Equally spaced applied displacements from 0 to `max_displacement` (inclusive).
    """
    if steps < 2:
        raise ConfigurationError(f"a load schedule needs at least 2 steps, got {steps}")

    return np.linspace(0.0, max_displacement, steps)


def normalization_constant(raw_energies : np.ndarray) -> float:
    """
    Dataset constant S: the largest final-step energy of the (training) curves.

    Arguments:

        - `raw_energies`       {np.ndarray}    : (n_samples, n_steps) raw total strain energies.

    Returns:

        - `scale`                {float}       : S > 0.
    """
    raw_energies = np.asarray(raw_energies, dtype = np.float64)

    if raw_energies.ndim != 2 or raw_energies.shape[0] == 0:
        raise ContractError(f"expected a non-empty (n_samples, n_steps) array, got {raw_energies.shape}")

    scale        = float(raw_energies[:, -1].max())

    if not scale > 0.0:
        raise DataFormatError("final-step energies are all zero; cannot normalize")

    return scale


def normalize_curves(raw_energies : np.ndarray, scale : float) -> np.ndarray:
    if not scale > 0.0:
        raise ConfigurationError(f"normalization constant must be positive, got {scale}")

    return np.asarray(raw_energies, dtype = np.float64) / scale


def curve_columns(steps : int = NUM_LOAD_STEPS) -> tuple:
    """ Column names `d0..d{n-1}` and `psi0..psi{n-1}`. """
    return [f"d{i}" for i in range(steps)], [f"psi{i}" for i in range(steps)]


def write_curves_csv(path : str | Path, sample_ids : list, curves : list) -> Path:
    """
    Write curves as CSV with header `sample_id, d0..d12, psi0..psi12`.

    Floats are written with 17 significant digits so identical inputs give identical bytes.
    """
    path                 = Path(path)

    if len(sample_ids) != len(curves):
        raise ContractError(f"{len(sample_ids)} ids for {len(curves)} curves")

    steps                = len(curves[0]) if curves else NUM_LOAD_STEPS
    d_cols, psi_cols     = curve_columns(steps)

    rows                 = [[int(sample_id), *curve.displacements, *curve.energies] for sample_id, curve in zip(sample_ids, curves)]
    frame                = pd.DataFrame(rows, columns = ["sample_id", *d_cols, *psi_cols])

    frame.to_csv(path, index = False, float_format = "%.17g")
    curves_logger.info(f"Wrote {len(curves)} curves to {path}")

    return path


def read_curves_csv(path : str | Path, normalized : bool = True) -> tuple:
    """
    Read a curve CSV.

    Returns:

        - `(sample_ids, curves)`      {tuple}     : List of integer ids and list of `EnergyCurve`.
    """
    path                 = Path(path)

    if not path.is_file():
        raise InputPathError(f"curve file not found: {path}")

    try:
        frame            = pd.read_csv(path, skipinitialspace = True, float_precision = "round_trip")
        frame.columns    = [column.strip() for column in frame.columns]

        d_cols           = sorted([c for c in frame.columns if c.startswith("d") and c[1:].isdigit()], key = lambda c: int(c[1:]))
        psi_cols         = sorted([c for c in frame.columns if c.startswith("psi") and c[3:].isdigit()], key = lambda c: int(c[3:]))

        if "sample_id" not in frame.columns or not d_cols or len(d_cols) != len(psi_cols):
            raise DataFormatError(f"{path.name} lacks a `sample_id, d0.., psi0..` header")

        sample_ids       = frame["sample_id"].astype(int).tolist()
        curves           = [EnergyCurve(d, psi, normalized = normalized) for d, psi in zip(frame[d_cols].to_numpy(np.float64), frame[psi_cols].to_numpy(np.float64))]

        return sample_ids, curves

    except (ValueError, KeyError) as e:
        curves_logger.error(f"Error reading curve CSV: {repr(e)}")

        if isinstance(e, DataFormatError):
            raise

        raise DataFormatError(f"malformed curve file {path.name}: {e}") from e


@dataclass
class DatasetManifest:
    """
    Key-value description of a generated data set.
    """
    split            : str
    count            : int
    normalization    : float
    poisson          : float = POISSON_RATIO
    displacements    : np.ndarray = field(default_factory = canonical_displacements)
    subdivision      : int = 2
    images_file      : str = "images.idx"
    curves_file      : str = "curves.csv"
    raw_curves_file  : str = "raw_curves.csv"
    source_offset    : int = 0
    split_sizes      : dict = field(default_factory = dict)

    def to_settings(self) -> dict:
        settings = {"split"            : self.split,
                    "count"            : self.count,
                    "normalization"    : repr(float(self.normalization)),
                    "poisson"          : self.poisson,
                    "displacements"    : [repr(float(d)) for d in self.displacements],
                    "subdivision"      : self.subdivision,
                    "images_file"      : self.images_file,
                    "curves_file"      : self.curves_file,
                    "raw_curves_file"  : self.raw_curves_file,
                    "source_offset"    : self.source_offset,
                    }

        for split_name, size in self.split_sizes.items():
            settings[f"{split_name}_size"] = size

        return settings

    def write(self, path : str | Path) -> Path:
        path = Path(path)
        path.write_text(format_config(self.to_settings()))

        return path

    @classmethod
    def read(cls, path : str | Path) -> "DatasetManifest":
        if not Path(path).is_file():
            raise InputPathError(f"manifest not found: {path}")

        settings = load_config_file(path)

        try:
            split_sizes = {key[:-5] : int(value) for key, value in settings.items() if key.endswith("_size")}

            return cls(split            = settings["split"],
                       count            = int(settings["count"]),
                       normalization    = float(settings["normalization"]),
                       poisson          = float(settings.get("poisson", POISSON_RATIO)),
                       displacements    = np.array([float(v) for v in settings["displacements"].split(",")]),
                       subdivision      = int(settings.get("subdivision", 2)),
                       images_file      = settings.get("images_file", "images.idx"),
                       curves_file      = settings.get("curves_file", "curves.csv"),
                       raw_curves_file  = settings.get("raw_curves_file", "raw_curves.csv"),
                       source_offset    = int(settings.get("source_offset", 0)),
                       split_sizes      = split_sizes,
                       )

        except (KeyError, ValueError) as e:
            raise DataFormatError(f"malformed manifest {path}: {e!r}") from e
