# SURROGATE TRAINING WITH PLATEAU LEARNING-RATE DECAY

# DEPENDENCIES

import math
import torch
import numpy as np
import pandas as pd
import torch.nn.functional as F
from tqdm import tqdm
from pathlib import Path
from dataclasses import asdict
from dataclasses import dataclass

from config.config import SURROGATE_LR
from config.config import SURROGATE_BATCH
from config.config import SURROGATE_EPOCHS
from config.config import SURROGATE_PATIENCE
from config.config import SURROGATE_LR_FACTOR
from logger.logger import LoggerSetup
from src.surrogate.model import SurrogateCNN
from src.surrogate.model import SurrogateConfig
from src.utils.image_io import to_unit_range
from src.utils.checkpoint import save_checkpoint
from src.utils.checkpoint import load_checkpoint
from src.utils.exceptions import ContractError
from src.utils.exceptions import ConfigurationError
from src.utils.exceptions import NumericalFailureError

# LOGGER SETUP
surrogate_logger  = LoggerSetup(logger_name = "trainer.py", log_filename_prefix = "surrogate_trainer").get_logger()

CHECKPOINT_KIND   = "surrogate"
EPOCH_LOG_COLUMNS = ["epoch", "train_mse", "val_mse", "lr"]


@dataclass
class SurrogateTrainingConfig:
    """
    `early_stop` is a patience in epochs on the validation loss; None trains for all `epochs`.
    """
    epochs       : int        = SURROGATE_EPOCHS
    batch_size   : int        = SURROGATE_BATCH
    lr           : float      = SURROGATE_LR
    lr_factor    : float      = SURROGATE_LR_FACTOR
    patience     : int        = SURROGATE_PATIENCE
    early_stop   : int | None = None
    val_fraction : float      = 0.1
    seed         : int        = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError(f"validation fraction must lie in [0, 1), got {self.val_fraction}")

        if self.patience < 1:
            raise ConfigurationError(f"plateau patience must be at least 1 epoch, got {self.patience}")

    def to_settings(self) -> dict:
        return asdict(self)


def plateau_scheduler(optimizer : torch.optim.Optimizer, config : SurrogateTrainingConfig) -> torch.optim.lr_scheduler.ReduceLROnPlateau:
    """
    Multiply the learning rate by `lr_factor` on the `patience`-th consecutive epoch without
    improvement; the stale count then restarts.
    """
    # torch cuts once the stale count EXCEEDS its patience
    return torch.optim.lr_scheduler.ReduceLROnPlateau(optimizer, mode = "min", factor = config.lr_factor, patience = config.patience - 1)


def split_indices(count : int, val_fraction : float, seed : int = 0) -> tuple:
    """
    Seeded train/validation split. At least one sample stays in training.
    """
    order     = np.random.default_rng(seed).permutation(count)
    n_val     = min(int(round(count * val_fraction)), max(count - 1, 0))

    return np.sort(order[n_val:]), np.sort(order[:n_val])


class SurrogateTrainer:

    def __init__(self, model : SurrogateCNN, config : SurrogateTrainingConfig | None = None,
                 output_dir : str | Path | None = None, device : str | torch.device = "cpu") -> None:
        self.model      = model.to(device)
        self.config     = config if config is not None else SurrogateTrainingConfig()
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.device     = torch.device(device)
        self.optimizer  = torch.optim.Adam(self.model.parameters(), lr = self.config.lr)
        self.scheduler  = plateau_scheduler(self.optimizer, self.config)
        self.generator  = torch.Generator().manual_seed(self.config.seed)
        self.epoch      = 0
        self.history    = []

    @property
    def checkpoint_path(self) -> Path | None:
        return None if self.output_dir is None else self.output_dir / "surrogate.pt"

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def save(self, path : str | Path) -> Path:
        extra = {"training"        : self.config.to_settings(),
                 "history"         : {column : [float(row[column]) for row in self.history] for column in EPOCH_LOG_COLUMNS},
                 "generator_state" : self.generator.get_state(),
                 }

        return save_checkpoint(path,
                               kind   = CHECKPOINT_KIND,
                               config = self.model.config.to_settings(),
                               states = {"model"     : self.model.state_dict(),
                                         "optimizer" : self.optimizer.state_dict(),
                                         "scheduler" : self.scheduler.state_dict(),
                                         },
                               step   = self.epoch,
                               extra  = extra,
                               )

    def resume(self, path : str | Path) -> int:
        payload      = load_checkpoint(path, CHECKPOINT_KIND, expected_config = self.model.config.to_settings(), map_location = str(self.device))

        self.model.load_state_dict(payload["states"]["model"])
        self.optimizer.load_state_dict(payload["states"]["optimizer"])
        self.scheduler.load_state_dict(payload["states"]["scheduler"])
        self.generator.set_state(payload["extra"]["generator_state"].cpu())

        self.history = pd.DataFrame(payload["extra"].get("history", {}), columns = EPOCH_LOG_COLUMNS).to_dict("records")
        self.epoch   = int(payload["step"])

        surrogate_logger.info(f"Resumed surrogate training at epoch {self.epoch} from {path}")

        return self.epoch

    def _evaluate(self, x : torch.Tensor, y : torch.Tensor) -> float:
        if x.shape[0] == 0:
            return math.nan

        self.model.eval()

        with torch.no_grad():
            loss = F.mse_loss(self.model(x.to(self.device)), y.to(self.device))

        return float(loss)

    def fit(self, images : np.ndarray, curves : np.ndarray, progress : bool = True) -> pd.DataFrame:
        """
        Train on aligned bitmaps and normalized curves until `config.epochs` epochs are done in total.

        Arguments:

            - `images`          {np.ndarray}      : (N, 28, 28) uint8 bitmaps.

            - `curves`          {np.ndarray}      : (N, 13) normalized energy curves.

        Returns:

            - `log`           {pd.DataFrame}      : `epoch, train_mse, val_mse, lr` per epoch; `val_mse` is
                                                    NaN without a validation split, and the plateau rule
                                                    then watches the training loss.

        Raises:

            - `NumericalFailureError`             : Non-finite batch loss; a checkpoint is written first.
        """
        images               = np.asarray(images)
        curves               = np.asarray(curves, dtype = np.float32)

        if images.shape[0] != curves.shape[0]:
            raise ContractError(f"{images.shape[0]} images for {curves.shape[0]} curves")

        train_idx, val_idx   = split_indices(images.shape[0], self.config.val_fraction, self.config.seed)
        x_all                = to_unit_range(images)
        y_all                = torch.as_tensor(curves)
        x_train, y_train     = x_all[train_idx], y_all[train_idx]
        x_val, y_val         = x_all[val_idx], y_all[val_idx]

        best_val             = math.inf
        stale_epochs         = 0

        surrogate_logger.info(f"Training surrogate on {len(train_idx)} samples ({len(val_idx)} held out) for {self.config.epochs - self.epoch} epochs")

        epochs               = range(self.epoch, self.config.epochs)

        for _ in tqdm(epochs, desc = "surrogate", unit = "epoch", disable = not progress):
            self.model.train()

            order            = torch.randperm(len(train_idx), generator = self.generator)

            for start in range(0, len(order), self.config.batch_size):
                batch        = order[start:start + self.config.batch_size]
                loss         = F.mse_loss(self.model(x_train[batch].to(self.device)), y_train[batch].to(self.device))

                if not torch.isfinite(loss):
                    error    = NumericalFailureError(f"non-finite surrogate loss {float(loss)}", step = self.epoch + 1)
                    surrogate_logger.error(f"Error in surrogate training: {repr(error)}")

                    if self.output_dir is not None:
                        self.save(self.output_dir / "surrogate_last_good.pt")

                    raise error

                self.optimizer.zero_grad(set_to_none = True)
                loss.backward()
                self.optimizer.step()

            train_mse        = self._evaluate(x_train, y_train)
            val_mse          = self._evaluate(x_val, y_val)
            monitored        = train_mse if math.isnan(val_mse) else val_mse

            self.epoch      += 1
            self.history.append({"epoch" : self.epoch, "train_mse" : train_mse, "val_mse" : val_mse, "lr" : self.lr})
            self.scheduler.step(monitored)

            if monitored < best_val:
                best_val     = monitored
                stale_epochs = 0

            else:
                stale_epochs += 1

            if self.config.early_stop is not None and stale_epochs >= self.config.early_stop:
                surrogate_logger.info(f"Early stop at epoch {self.epoch}: no improvement for {stale_epochs} epochs")
                break

        log                  = pd.DataFrame(self.history, columns = EPOCH_LOG_COLUMNS)

        if self.output_dir is not None:
            self.output_dir.mkdir(parents = True, exist_ok = True)
            log.to_csv(self.output_dir / "surrogate_log.csv", index = False)
            self.save(self.checkpoint_path)

        if len(log):
            surrogate_logger.info(f"Surrogate training done: train MSE {log['train_mse'].iloc[-1]:.3e}, val MSE {log['val_mse'].iloc[-1]:.3e}")

        return log


def load_surrogate(path : str | Path, device : str | torch.device = "cpu") -> SurrogateCNN:
    payload = load_checkpoint(path, CHECKPOINT_KIND, map_location = str(device))
    model   = SurrogateCNN(SurrogateConfig.from_settings(payload["config"]))

    model.load_state_dict(payload["states"]["model"])

    return model.to(device).eval()
