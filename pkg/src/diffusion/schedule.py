# NOISE SCHEDULE TABLES

# DEPENDENCIES

import torch
import numpy as np
from dataclasses import dataclass

from config.config import BETA_END
from config.config import MAX_BETA
from config.config import BETA_START
from config.config import DIFFUSION_STEPS
from src.utils.exceptions import ConfigurationError


@dataclass(frozen = True, eq = False)
class NoiseSchedule:
    """
    Per-step diffusion tables indexed by t = 0..T.

    Index 0 is the clean-data convention: beta_0 = 0, alpha_bar_0 = 1, beta_tilde_0 = 0. All arrays
    are float64 of length T + 1.
    """
    betas                : np.ndarray
    alphas               : np.ndarray
    alphas_bar           : np.ndarray
    betas_tilde          : np.ndarray
    log_betas_tilde      : np.ndarray
    posterior_coef_x0    : np.ndarray
    posterior_coef_xt    : np.ndarray

    @classmethod
    def from_betas(cls, betas : np.ndarray) -> "NoiseSchedule":
        """
        Build every derived table from beta_1..beta_T.

        Raises:

            - `ConfigurationError`        : Fewer than 2 steps or any beta outside (0, 1).
        """
        betas               = np.asarray(betas, dtype = np.float64)

        if betas.ndim != 1 or betas.size < 2:
            raise ConfigurationError(f"a schedule needs at least 2 steps, got {betas.size}")

        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigurationError(f"betas must lie in (0, 1); got range [{betas.min()}, {betas.max()}]")

        padded_betas        = np.concatenate([[0.0], betas])
        alphas              = 1.0 - padded_betas
        alphas_bar          = np.cumprod(alphas)
        alphas_bar_prev     = np.concatenate([[1.0], alphas_bar[:-1]])

        betas_tilde         = np.zeros_like(padded_betas)
        betas_tilde[1:]     = (1.0 - alphas_bar_prev[1:]) / (1.0 - alphas_bar[1:]) * padded_betas[1:]

        # beta_tilde_1 = 0; THE LOG TABLE BORROWS beta_tilde_2 AT t = 1
        log_betas_tilde     = np.full_like(padded_betas, -np.inf)
        log_betas_tilde[2:] = np.log(betas_tilde[2:])
        log_betas_tilde[1]  = log_betas_tilde[2]

        coef_x0             = np.zeros_like(padded_betas)
        coef_xt             = np.zeros_like(padded_betas)
        coef_x0[1:]         = padded_betas[1:] * np.sqrt(alphas_bar_prev[1:]) / (1.0 - alphas_bar[1:])
        coef_xt[1:]         = (1.0 - alphas_bar_prev[1:]) * np.sqrt(alphas[1:]) / (1.0 - alphas_bar[1:])

        return cls(betas             = padded_betas,
                   alphas            = alphas,
                   alphas_bar        = alphas_bar,
                   betas_tilde       = betas_tilde,
                   log_betas_tilde   = log_betas_tilde,
                   posterior_coef_x0 = coef_x0,
                   posterior_coef_xt = coef_xt,
                   )

    @property
    def T(self) -> int:
        return int(self.betas.size - 1)

    @property
    def alphas_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alphas_bar[:-1]])

    def extract(self, name : str, t : torch.Tensor, like : torch.Tensor) -> torch.Tensor:
        """
        Gather table `name` at a batch of steps and shape it to broadcast against `like`.

        The result has `like`'s dtype and device and shape (B, 1, ..., 1).
        """
        table  = torch.from_numpy(getattr(self, name)).to(device = like.device)
        values = table[t.to(device = like.device, dtype = torch.long)].to(like.dtype)

        return values.view(-1, *([1] * (like.ndim - 1)))

    def to_settings(self) -> dict:
        return {"T" : self.T, "betas" : self.betas[1:].tolist()}


def linear_beta_schedule(T : int = DIFFUSION_STEPS, beta_start : float = BETA_START, beta_end : float = BETA_END,
                         max_beta : float = MAX_BETA) -> NoiseSchedule:
    """
    Linearly spaced betas; endpoints are given for T = 1000 and scaled by 1000 / T.

    Below T = 50 the scaled end point passes 1, so every beta is capped at `max_beta`.

    Arguments:

        - `T`                   {int}      : Number of diffusion steps, T >= 2.

        - `beta_start`         {float}     : beta_1 at T = 1000.

        - `beta_end`           {float}     : beta_T at T = 1000.

        - `max_beta`           {float}     : Upper cap, inside (0, 1).

    Returns:

        - `schedule`      {NoiseSchedule}  : Populated tables.
    """
    if T < 2:
        raise ConfigurationError(f"T must be at least 2, got {T}")

    if not 0.0 < beta_start < beta_end:
        raise ConfigurationError(f"need 0 < beta_start < beta_end, got {beta_start} and {beta_end}")

    if not 0.0 < max_beta < 1.0:
        raise ConfigurationError(f"max_beta must lie in (0, 1), got {max_beta}")

    scale = 1000.0 / T
    betas = np.minimum(np.linspace(scale * beta_start, scale * beta_end, T), max_beta)

    if betas[0] >= max_beta:
        raise ConfigurationError(f"T = {T} leaves no step below max_beta = {max_beta}")

    return NoiseSchedule.from_betas(betas)
