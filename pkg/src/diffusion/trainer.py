# DIFFUSION MODEL TRAINING LOOP WITH CONTEXT DROPPING

# DEPENDENCIES

import math
import torch
import numpy as np
import pandas as pd
from tqdm import tqdm
from pathlib import Path
from dataclasses import asdict
from dataclasses import dataclass

from config.config import BETA_END
from config.config import BETA_START
from config.config import VLB_WEIGHT
from config.config import DIFFUSION_LR
from config.config import DIFFUSION_BATCH
from config.config import DIFFUSION_STEPS
from config.config import CONTEXT_DROP_PROB
from config.config import DIFFUSION_TRAIN_STEPS
from logger.logger import LoggerSetup
from src.diffusion.schedule import NoiseSchedule
from src.diffusion.gaussian_diffusion import loss_hybrid
from src.denoiser.conditional import build_denoiser
from src.denoiser.conditional import ConditionalDenoiser
from src.context.encoders import ContextBundle
from src.context.encoders import context_keep_masks
from src.utils.image_io import to_unit_range
from src.utils.image_io import pad_to_canvas
from src.utils.image_io import to_model_range
from src.utils.checkpoint import save_checkpoint
from src.utils.checkpoint import load_checkpoint
from src.utils.exceptions import ContractError
from src.utils.exceptions import NumericalFailureError

# LOGGER SETUP
trainer_logger       = LoggerSetup(logger_name = "trainer.py", log_filename_prefix = "diffusion_trainer").get_logger()

CHECKPOINT_KIND      = "diffusion"
LOSS_LOG_COLUMNS     = ["step", "l_mu", "l_vlb", "l_hybrid"]


@dataclass
class DiffusionTrainingConfig:
    steps            : int   = DIFFUSION_TRAIN_STEPS
    batch_size       : int   = DIFFUSION_BATCH
    lr               : float = DIFFUSION_LR
    drop_prob        : float = CONTEXT_DROP_PROB
    independent_drop : bool  = False
    vlb_weight       : float = VLB_WEIGHT
    seed             : int   = 0
    checkpoint_every : int   = 5000
    log_every        : int   = 100
    T                : int   = DIFFUSION_STEPS
    beta_start       : float = BETA_START
    beta_end         : float = BETA_END

    def to_settings(self) -> dict:
        return asdict(self)


class DiffusionTrainer:
    """
    Single-writer training loop for a `ConditionalDenoiser`.

    Each step draws a batch with replacement, uniform steps t in [1, T], Gaussian noise and per-row
    context keep masks from one seeded generator, then takes an Adam step on the hybrid loss. The
    generator state travels with the checkpoint so a resumed run continues the same stream.
    """

    def __init__(self, model : ConditionalDenoiser, schedule : NoiseSchedule, config : DiffusionTrainingConfig | None = None,
                 output_dir : str | Path | None = None, device : str | torch.device = "cpu") -> None:
        self.model      = model.to(device)
        self.schedule   = schedule
        self.config     = config if config is not None else DiffusionTrainingConfig()
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.device     = torch.device(device)
        self.optimizer  = torch.optim.Adam(self.model.parameters(), lr = self.config.lr)
        self.generator  = torch.Generator().manual_seed(self.config.seed)
        self.step       = 0
        self.history    = []

    @property
    def checkpoint_path(self) -> Path | None:
        return None if self.output_dir is None else self.output_dir / "checkpoint.pt"

    def _checkpoint_config(self) -> dict:
        settings               = self.model.to_settings()
        settings["T"]          = self.schedule.T

        return settings

    def save(self, path : str | Path) -> Path:
        extra = {"betas"           : self.schedule.betas[1:].tolist(),
                 "training"        : self.config.to_settings(),
                 "history"         : {column : [float(row[column]) for row in self.history] for column in LOSS_LOG_COLUMNS},
                 "generator_state" : self.generator.get_state(),
                 }

        return save_checkpoint(path,
                               kind   = CHECKPOINT_KIND,
                               config = self._checkpoint_config(),
                               states = {"model" : self.model.state_dict(), "optimizer" : self.optimizer.state_dict()},
                               step   = self.step,
                               extra  = extra,
                               )

    def resume(self, path : str | Path) -> int:
        """
        Restore weights, optimizer, random stream, loss history and the step counter.
        """
        payload        = load_checkpoint(path, CHECKPOINT_KIND, expected_config = self._checkpoint_config(), map_location = str(self.device))

        self.model.load_state_dict(payload["states"]["model"])
        self.optimizer.load_state_dict(payload["states"]["optimizer"])
        self.generator.set_state(payload["extra"]["generator_state"].cpu())

        history        = pd.DataFrame(payload["extra"].get("history", {}), columns = LOSS_LOG_COLUMNS)
        self.history   = history.to_dict("records")
        self.step      = int(payload["step"])

        trainer_logger.info(f"Resumed diffusion training at step {self.step} from {path}")

        return self.step

    def _prepare(self, images : np.ndarray, curves : np.ndarray | None, topologies : np.ndarray | None) -> tuple:
        images          = np.asarray(images)
        x0              = pad_to_canvas(to_model_range(images), self.model.unet.config.canvas)

        curve_tensor    = None
        topology_tensor = None

        if self.model.curve_encoder is not None:
            if curves is None:
                raise ContractError("the denoiser has a curve encoder but no curves were given")

            curve_tensor    = torch.as_tensor(np.asarray(curves), dtype = torch.float32)

            if curve_tensor.shape[0] != images.shape[0]:
                raise ContractError(f"{curve_tensor.shape[0]} curves for {images.shape[0]} images")

        if self.model.topology_encoder is not None:
            topologies      = images if topologies is None else np.asarray(topologies)

            if topologies.shape[0] != images.shape[0]:
                raise ContractError(f"{topologies.shape[0]} topology images for {images.shape[0]} images")

            topology_tensor = to_unit_range(topologies)

        return x0, ContextBundle(curves = curve_tensor, topology = topology_tensor)

    def train_step(self, x0 : torch.Tensor, contexts : ContextBundle | None) -> dict:
        """ One optimizer update on a prepared batch; returns the loss row. """
        config       = self.config
        batch        = x0.shape[0]

        t            = torch.randint(1, self.schedule.T + 1, (batch,), generator = self.generator)
        eps          = torch.randn(x0.shape, generator = self.generator)

        if contexts is not None and not contexts.is_empty:
            keep     = context_keep_masks(batch, config.drop_prob, self.generator, config.independent_drop)
            contexts = contexts.with_masks(*keep).to(self.device)

        else:
            contexts = None

        losses       = loss_hybrid(self.model, x0.to(self.device), contexts, t.to(self.device), eps.to(self.device),
                                   self.schedule, vlb_weight = config.vlb_weight)

        if not torch.isfinite(losses.l_hybrid):
            raise NumericalFailureError(f"non-finite training loss {float(losses.l_hybrid)}", step = self.step + 1)

        self.optimizer.zero_grad(set_to_none = True)
        losses.l_hybrid.backward()
        self.optimizer.step()

        self.step   += 1

        return {"step" : self.step, **losses.as_row()}

    def train(self, images : np.ndarray, curves : np.ndarray | None = None, topologies : np.ndarray | None = None,
              progress : bool = True) -> pd.DataFrame:
        """
        Run until `config.steps` optimizer steps have been taken in total.

        Arguments:

            - `images`             {np.ndarray}      : (N, 28, 28) uint8 training bitmaps.

            - `curves`             {np.ndarray}      : (N, 13) normalized curves aligned with `images`.

            - `topologies`         {np.ndarray}      : (N, 28, 28) topology contexts; the training
                                                       images themselves when omitted.

        Returns:

            - `log`              {pd.DataFrame}      : `step, l_mu, l_vlb, l_hybrid` per step.

        Raises:

            - `NumericalFailureError`                : Non-finite loss; the last good state is
                                                       saved as `checkpoint_last_good.pt` first.
        """
        x0_all, bundle   = self._prepare(images, curves, topologies)
        count            = x0_all.shape[0]
        remaining        = max(0, self.config.steps - self.step)

        trainer_logger.info(f"Training diffusion model on {count} samples for {remaining} steps (T = {self.schedule.T})")

        self.model.train()

        for _ in tqdm(range(remaining), desc = "diffusion", unit = "step", disable = not progress):
            index        = torch.randint(0, count, (self.config.batch_size,), generator = self.generator)

            try:
                row      = self.train_step(x0_all[index], bundle.select(index))

            except NumericalFailureError as e:
                trainer_logger.error(f"Error in diffusion training: {repr(e)}")

                if self.output_dir is not None:
                    self.save(self.output_dir / "checkpoint_last_good.pt")

                raise

            self.history.append(row)

            if self.config.log_every and self.step % self.config.log_every == 0:
                smoothed = smoothed_loss(self.history, "l_mu", self.config.log_every)
                trainer_logger.info(f"step {self.step}: l_mu {row['l_mu']:.5f} (smoothed {smoothed:.5f})  l_vlb {row['l_vlb']:.4f}  l_hybrid {row['l_hybrid']:.5f}")

            if self.output_dir is not None and self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                self.save(self.checkpoint_path)

        log              = pd.DataFrame(self.history, columns = LOSS_LOG_COLUMNS)

        if self.output_dir is not None:
            self.output_dir.mkdir(parents = True, exist_ok = True)
            log.to_csv(self.output_dir / "loss_log.csv", index = False)
            self.save(self.checkpoint_path)

        return log


def smoothed_loss(history : list, column : str = "l_mu", window : int = 100) -> float:
    """ Mean of `column` over the last `window` rows of a loss history. """
    recent = history[-max(1, int(window)):]

    return float(np.mean([row[column] for row in recent])) if recent else math.nan


def smoothed_improvement(log : pd.DataFrame, column : str = "l_mu", fraction : float = 0.1) -> float:
    """
    Relative drop of the mean of `column` from the first to the last `fraction` of the log.
    """
    window = max(1, int(math.ceil(len(log) * fraction)))
    first  = log[column].iloc[:window].mean()
    last   = log[column].iloc[-window:].mean()

    return float((first - last) / first)


def load_diffusion(path : str | Path, device : str | torch.device = "cpu") -> tuple:
    """
    Rebuild a trained denoiser and its schedule from a checkpoint.

    Returns:

        - `(model, schedule, payload)`      {tuple}      : Model in eval mode on `device`.
    """
    payload  = load_checkpoint(path, CHECKPOINT_KIND, map_location = str(device))
    model    = build_denoiser(payload["config"])

    model.load_state_dict(payload["states"]["model"])
    model.to(device).eval()

    schedule = NoiseSchedule.from_betas(np.asarray(payload["extra"]["betas"]))

    trainer_logger.info(f"Loaded diffusion checkpoint {path} at step {payload['step']} (T = {schedule.T})")

    return model, schedule, payload
