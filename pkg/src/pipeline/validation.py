# FEM VALIDATION OF SURROGATE-ACCEPTED DESIGNS

# DEPENDENCIES

import math
import numpy as np
import pandas as pd
from tqdm import tqdm
from scipy.stats import spearmanr
from concurrent.futures import ProcessPoolExecutor

from config.config import SUBDIVISION
from logger.logger import LoggerSetup
from src.mnist_data.curves import EnergyCurve
from src.mnist_data.material import to_property_field
from src.mnist_data.idx_reader import Bitmap
from src.fem_solver.solver import LoadSchedule
from src.fem_solver.solver import NewtonSettings
from src.fem_solver.solver import run_uniaxial_extension
from src.surrogate.model import mse
from src.utils.exceptions import ConfigurationError
from src.utils.exceptions import NumericalFailureError

# LOGGER SETUP
validation_logger  = LoggerSetup(logger_name = "validation.py", log_filename_prefix = "validation").get_logger()

VALIDATION_COLUMNS = ["sample_id", "surrogate_mse", "fem_mse", "converged", "error"]


def _validate_one(job : tuple) -> tuple:
    """ FEM curve of one bitmap; a numerical failure is returned as text instead of raised. """
    image, schedule, subdivision, settings, normalization = job

    try:
        curve = run_uniaxial_extension(to_property_field(Bitmap(image)), schedule, subdivision, settings, normalization = normalization)

        return curve.energies, ""

    except NumericalFailureError as e:
        return None, repr(e)


def validate_with_fem(images : np.ndarray, target : EnergyCurve, k : int, normalization : float, sample_ids : list | None = None,
                      surrogate_mse : list | None = None, subdivision : int = SUBDIVISION, settings : NewtonSettings | None = None,
                      jobs : int = 1) -> pd.DataFrame:
    """
    Re-score the first k designs with the finite element solver.

    Arguments:

        - `images`              {np.ndarray}      : (N, 28, 28) uint8 designs, best first.

        - `target`              {EnergyCurve}     : Normalized target behavior on the canonical schedule.

        - `k`                       {int}         : Number of designs to solve (capped at N).

        - `normalization`          {float}        : Dataset constant S turning raw energies into
                                                    the target's normalized units.

        - `sample_ids`              {list}        : Ids reported per row; 0..k-1 when omitted.

        - `surrogate_mse`           {list}        : Filter-time errors aligned with `images`.

    Returns:

        - `table`             {pd.DataFrame}      : One row per solved design; `fem_mse` is NaN and
                                                    `error` holds the failure when the solve did not
                                                    converge.
    """
    if k < 0:
        raise ConfigurationError(f"validation count must be non-negative, got {k}")

    images     = np.asarray(images)
    k          = min(k, len(images))

    if k == 0:
        return pd.DataFrame(columns = VALIDATION_COLUMNS)

    sample_ids = list(sample_ids) if sample_ids is not None else list(range(k))
    schedule   = LoadSchedule(target.displacements)
    settings   = settings if settings is not None else NewtonSettings()
    work       = [(images[i], schedule, subdivision, settings, normalization) for i in range(k)]

    validation_logger.info(f"Validating {k} designs with FEM (s = {subdivision}, jobs = {jobs})")

    if jobs <= 1:
        outcomes = [_validate_one(job) for job in tqdm(work, desc = "validate", unit = "design")]

    else:
        with ProcessPoolExecutor(max_workers = jobs) as executor:
            outcomes = list(tqdm(executor.map(_validate_one, work), total = k, desc = "validate", unit = "design"))

    rows       = []

    for i, (energies, error) in enumerate(outcomes):
        if error:
            validation_logger.warning(f"Design {sample_ids[i]} did not converge: {error}")

        rows.append({"sample_id"     : sample_ids[i],
                     "surrogate_mse" : float(surrogate_mse[i]) if surrogate_mse is not None else math.nan,
                     "fem_mse"       : mse(energies, target) if energies is not None else math.nan,
                     "converged"     : energies is not None,
                     "error"         : error,
                     })

    return pd.DataFrame(rows, columns = VALIDATION_COLUMNS)


def discrepancy_summary(table : pd.DataFrame, limit : float) -> dict:
    """
    Agreement between surrogate and FEM scoring over converged rows: Spearman rank correlation,
    share of designs within 3x the limit under FEM, and the mean absolute MSE gap.
    """
    solved = table[table["converged"].astype(bool)]
    both   = solved.dropna(subset = ["surrogate_mse", "fem_mse"])

    if len(both) >= 2 and both["surrogate_mse"].nunique() > 1 and both["fem_mse"].nunique() > 1:
        correlation = float(spearmanr(both["surrogate_mse"], both["fem_mse"])[0])

    else:
        correlation = math.nan

    return {"validated"        : int(len(table)),
            "converged"        : int(len(solved)),
            "spearman"         : correlation,
            "within_3x_limit"  : float((solved["fem_mse"] < 3.0 * limit).mean()) if len(solved) else math.nan,
            "mean_abs_gap"     : float((both["fem_mse"] - both["surrogate_mse"]).abs().mean()) if len(both) else math.nan,
            }
