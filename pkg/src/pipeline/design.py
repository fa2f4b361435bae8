# GENERATE -> FILTER -> RANK LOOP FOR TARGET BEHAVIORS

# DEPENDENCIES

import math
import torch
import numpy as np
import pandas as pd
from pathlib import Path
from dataclasses import field
from dataclasses import dataclass

from config.config import N_ACCEPT
from config.config import IMAGE_SIZE
from config.config import MSE_LIMIT
from config.config import MSE_QUANTILES
from config.config import MAX_GENERATED
from config.config import GENERATION_BATCH
from config.config import format_config
from logger.logger import LoggerSetup
from src.mnist_data.curves import EnergyCurve
from src.mnist_data.idx_reader import Bitmap
from src.mnist_data.idx_reader import write_idx
from src.diffusion.schedule import NoiseSchedule
from src.diffusion.gaussian_diffusion import p_sample_loop
from src.context.encoders import ContextBundle
from src.surrogate.model import SurrogateCNN
from src.surrogate.model import mse_to_target
from src.utils.image_io import save_image
from src.utils.image_io import image_grid
from src.utils.image_io import to_unit_range
from src.utils.exceptions import ContractError
from src.utils.exceptions import ConfigurationError

# LOGGER SETUP
design_logger = LoggerSetup(logger_name = "design.py", log_filename_prefix = "design").get_logger()

COMPLETE      = "complete"
CAPPED        = "capped"
EXHAUSTED     = "exhausted"


@dataclass
class GenerationTarget:
    """
    A behavior to design for, with an optional topology context.

    `mse_limit` may be 0 (nothing can pass) or +inf (everything finite passes).
    """
    behavior      : EnergyCurve
    topology      : Bitmap | None = None
    mse_limit     : float         = MSE_LIMIT
    n_accept      : int           = N_ACCEPT
    max_generated : int           = MAX_GENERATED
    name          : str           = "target"

    def __post_init__(self) -> None:
        if math.isnan(self.mse_limit) or self.mse_limit < 0.0:
            raise ConfigurationError(f"mse_limit must be non-negative, got {self.mse_limit}")

        if self.n_accept < 1 or self.max_generated < 1:
            raise ConfigurationError(f"n_accept and max_generated must be at least 1, got {self.n_accept} and {self.max_generated}")

    def contexts(self) -> ContextBundle:
        """ Single-row context bundle: the behavior curve and, when set, the topology in [0, 1]. """
        curves   = torch.as_tensor(self.behavior.energies, dtype = torch.float32)[None, :]
        topology = None if self.topology is None else to_unit_range(self.topology.values[None])

        return ContextBundle(curves = curves, topology = topology)


@dataclass
class SampleRecord:
    sample_id      : int
    batch          : int
    seed           : int
    surrogate_mse  : float
    accepted       : bool
    mean_intensity : float


@dataclass
class FilterReport:
    """
    Outcome of one filtering run. Records are ordered by sample id; `snapshots` holds the
    intermediate bitmaps of the first batch and is not part of the persisted table.
    """
    target_name   : str
    mse_limit     : float
    n_accept      : int
    max_generated : int
    batch_size    : int
    status        : str
    records       : list = field(default_factory = list)
    seeds         : list = field(default_factory = list)
    snapshots     : dict = field(default_factory = dict)

    @property
    def generated_count(self) -> int:
        return len(self.records)

    @property
    def accepted_ids(self) -> list:
        return [record.sample_id for record in self.records if record.accepted]

    @property
    def accepted_count(self) -> int:
        return len(self.accepted_ids)

    @property
    def mse_values(self) -> np.ndarray:
        return np.array([record.surrogate_mse for record in self.records], dtype = np.float64)

    @property
    def quantiles(self) -> dict:
        return mse_quantiles(self.mse_values)

    @property
    def mean_accepted_intensity(self) -> float:
        """ Mean pixel value over accepted samples; thicker, stiffer designs score higher. """
        values = [record.mean_intensity for record in self.records if record.accepted]

        return float(np.mean(values)) if values else math.nan

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(record) for record in self.records],
                            columns = ["sample_id", "batch", "seed", "surrogate_mse", "accepted", "mean_intensity"])

    def summary(self) -> dict:
        summary = {"target"                  : self.target_name,
                   "status"                  : self.status,
                   "mse_limit"               : self.mse_limit,
                   "n_accept"                : self.n_accept,
                   "max_generated"           : self.max_generated,
                   "batch_size"              : self.batch_size,
                   "generated_count"         : self.generated_count,
                   "accepted_count"          : self.accepted_count,
                   "mean_accepted_intensity" : self.mean_accepted_intensity,
                   "seeds"                   : self.seeds,
                   }

        for q, value in self.quantiles.items():
            summary[f"mse_q{int(round(q * 100)):03d}"] = value

        return summary

    def write(self, output_dir : str | Path) -> tuple:
        """ Persist `report.csv` and `summary.txt`; returns both paths. """
        output_dir = Path(output_dir)
        output_dir.mkdir(parents = True, exist_ok = True)

        table_path = output_dir / "report.csv"
        self.to_frame().to_csv(table_path, index = False)

        summary    = output_dir / "summary.txt"
        summary.write_text(format_config(self.summary()))

        return table_path, summary


class GeneratedPool:
    """
    Cache of generated bitmaps and their surrogate predictions, appended batch by batch, so a pool
    can be re-filtered at any limit without sampling again.
    """

    def __init__(self) -> None:
        self._images      = []
        self._predictions = []
        self._batches     = []
        self.seeds        = []

    def __len__(self) -> int:
        return sum(len(chunk) for chunk in self._images)

    def append(self, images : np.ndarray, predictions : np.ndarray, seed : int) -> None:
        if len(images) != len(predictions):
            raise ContractError(f"{len(images)} images for {len(predictions)} predictions")

        self._batches.append(np.full(len(images), len(self.seeds), dtype = np.int64))
        self._images.append(np.asarray(images, dtype = np.uint8))
        self._predictions.append(np.asarray(predictions, dtype = np.float64))
        self.seeds.append(int(seed))

    @property
    def images(self) -> np.ndarray:
        return np.concatenate(self._images) if self._images else np.zeros((0, 0, 0), dtype = np.uint8)

    @property
    def predictions(self) -> np.ndarray:
        return np.concatenate(self._predictions) if self._predictions else np.zeros((0, 0))

    @property
    def batches(self) -> np.ndarray:
        return np.concatenate(self._batches) if self._batches else np.zeros(0, dtype = np.int64)


def mse_quantiles(values : np.ndarray, quantiles : tuple = MSE_QUANTILES) -> dict:
    """ Requested quantiles of the finite MSE values; NaN for an empty set. """
    values = np.asarray(values, dtype = np.float64)
    values = values[np.isfinite(values)]

    if values.size == 0:
        return {q : math.nan for q in quantiles}

    return {q : float(np.quantile(values, q)) for q in quantiles}


def batch_seed(seed : int, batch : int) -> int:
    """ Independent 63-bit seed for batch k of a run seeded with `seed`. """
    return int(np.random.SeedSequence([seed, batch]).generate_state(1, dtype = np.uint64)[0]) & ((1 << 63) - 1)


def _score(pool : GeneratedPool, target : GenerationTarget, batch_size : int, status : str | None = None) -> tuple:
    """
    Apply the target's limit to a pool in sample-id order. A sample is accepted when its MSE is
    below the limit and fewer than `n_accept` samples were accepted before it.
    """
    images        = pool.images
    errors        = mse_to_target(pool.predictions, target.behavior) if len(pool) else np.zeros(0)
    batches       = pool.batches
    intensities   = images.reshape(len(images), -1).mean(axis = 1) if len(images) else np.zeros(0)

    records       = []
    accepted      = 0

    for sample_id, error in enumerate(errors):
        passes    = bool(error < target.mse_limit) and accepted < target.n_accept
        accepted += int(passes)

        records.append(SampleRecord(sample_id      = sample_id,
                                    batch          = int(batches[sample_id]),
                                    seed           = pool.seeds[batches[sample_id]],
                                    surrogate_mse  = float(error),
                                    accepted       = passes,
                                    mean_intensity = float(intensities[sample_id]),
                                    ))

    if status is None:
        status    = COMPLETE if accepted >= target.n_accept else (EXHAUSTED if accepted == 0 else CAPPED)

    report        = FilterReport(target_name   = target.name,
                                 mse_limit     = float(target.mse_limit),
                                 n_accept      = target.n_accept,
                                 max_generated = target.max_generated,
                                 batch_size    = batch_size,
                                 status        = status,
                                 records       = records,
                                 seeds         = list(pool.seeds),
                                 )
    chosen        = images[[record.sample_id for record in records if record.accepted]] if records else np.zeros((0, 0, 0), dtype = np.uint8)

    return chosen, report


def generate_and_filter(model, surrogate : SurrogateCNN, target : GenerationTarget, schedule : NoiseSchedule, seed : int = 0,
                        batch_size : int = GENERATION_BATCH, device : str | torch.device = "cpu", guidance_weight : float = 0.0,
                        pool : GeneratedPool | None = None, snapshot_steps : tuple = (), progress : bool = False) -> tuple:
    """
    Sample conditioned batches until `n_accept` samples pass the surrogate filter or the
    generation cap is reached.

    Batch k is sampled from its own seed derived from (`seed`, k), so a run is reproducible and
    a larger cap only appends batches.

    Arguments:

        - `model`                                        : Trained conditional denoiser.

        - `surrogate`               {SurrogateCNN}       : Curve predictor used as the filter.

        - `target`               {GenerationTarget}      : Behavior, optional topology, limits.

        - `schedule`               {NoiseSchedule}       : Diffusion tables the model was trained with.

        - `seed`                        {int}            : Run seed.

        - `pool`                   {GeneratedPool}       : Receives every generated batch when given.

    Returns:

        - `(accepted, report)`          {tuple}          : Accepted uint8 bitmaps in sample-id order
                                                           and the `FilterReport`. A cap hit without
                                                           acceptances yields the `exhausted` status.
    """
    pool          = pool if pool is not None else GeneratedPool()
    contexts      = target.contexts().for_batch(batch_size).to(device)
    snapshots     = {}
    accepted      = 0
    batch_index   = 0

    design_logger.info(f"Designing for {target.name}: limit {target.mse_limit:g}, {target.n_accept} wanted, cap {target.max_generated}")

    while accepted < target.n_accept and len(pool) < target.max_generated:
        generator = torch.Generator().manual_seed(batch_seed(seed, batch_index))
        result    = p_sample_loop(model, contexts, batch_size, schedule,
                                  generator       = generator,
                                  shape           = (1, model.unet.config.canvas, model.unet.config.canvas),
                                  snapshot_steps  = snapshot_steps if batch_index == 0 else (),
                                  guidance_weight = guidance_weight,
                                  device          = device,
                                  progress        = progress,
                                  )

        if batch_index == 0:
            snapshots = result.snapshots

        predictions = surrogate.predict_batch(result.images)
        errors      = mse_to_target(predictions, target.behavior)
        accepted    = min(target.n_accept, accepted + int(np.sum(errors < target.mse_limit)))

        pool.append(result.images, predictions, batch_seed(seed, batch_index))
        batch_index += 1

        design_logger.info(f"batch {batch_index}: {len(pool)} generated, {accepted} accepted")

    images, report = _score(pool, target, batch_size)
    report.snapshots = snapshots

    if report.status == EXHAUSTED:
        design_logger.warning(f"No sample met the limit {target.mse_limit:g} within {report.generated_count} generated")

    return images, report


def refilter(pool : GeneratedPool, target : GenerationTarget, batch_size : int = GENERATION_BATCH) -> tuple:
    """
    Re-apply a target's limit to cached samples without generating new ones.
    """
    return _score(pool, target, batch_size)


def rank(report : FilterReport, top_k : int | None = None, accepted_only : bool = False) -> list:
    """
    Sample ids by ascending surrogate MSE, ties broken by id; NaN errors sort last.
    """
    if report.generated_count == 0:
        raise ContractError("cannot rank an empty report")

    records = [record for record in report.records if record.accepted or not accepted_only]
    ordered = sorted(records, key = lambda record: (math.isnan(record.surrogate_mse), record.surrogate_mse, record.sample_id))
    ids     = [record.sample_id for record in ordered]

    return ids if top_k is None else ids[:top_k]


def save_design_images(output_dir : str | Path, images : np.ndarray, sample_ids : list, png : bool = False) -> list:
    """
    Write each accepted bitmap as PGM (and optionally PNG), an `accepted.idx` bundle and a grid.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents = True, exist_ok = True)
    images     = np.asarray(images, dtype = np.uint8).reshape(-1, IMAGE_SIZE, IMAGE_SIZE)
    written    = []

    for sample_id, image in zip(sample_ids, images):
        written.append(save_image(output_dir / f"design_{sample_id:05d}.pgm", image))

        if png:
            written.append(save_image(output_dir / f"design_{sample_id:05d}.png", image))

    written.append(write_idx(output_dir / "accepted.idx", images))

    if len(sample_ids):
        written.append(save_image(output_dir / "accepted_grid.pgm", image_grid(images)))

    return written


def save_snapshot_grids(output_dir : str | Path, snapshots : dict) -> list:
    """ One image grid per snapshot step, named by the number of completed denoising steps. """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents = True, exist_ok = True)

    return [save_image(output_dir / f"snapshot_step{step:04d}.pgm", image_grid(images)) for step, images in sorted(snapshots.items())]
