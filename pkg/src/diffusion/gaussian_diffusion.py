# GAUSSIAN DIFFUSION: FORWARD PROCESS, LEARNED-VARIANCE REVERSE PROCESS, LOSSES AND SAMPLING

# DEPENDENCIES

import math
import torch
import numpy as np
from tqdm import tqdm
from dataclasses import field
from dataclasses import dataclass

from config.config import IMAGE_SIZE
from config.config import VLB_WEIGHT
from config.config import PADDED_SIZE
from logger.logger import LoggerSetup
from src.diffusion.schedule import NoiseSchedule
from src.utils.image_io import to_pixel_range
from src.utils.image_io import crop_from_canvas
from src.utils.exceptions import ConfigurationError
from src.utils.exceptions import NumericalFailureError

# LOGGER SETUP
diffusion_logger = LoggerSetup(logger_name = "gaussian_diffusion.py", log_filename_prefix = "gaussian_diffusion").get_logger()

# HALF-WIDTH OF ONE OF THE 256 INTENSITY BINS ON [-1, 1]
BIN_HALF_WIDTH   = 1.0 / 255.0


def mean_flat(x : torch.Tensor) -> torch.Tensor:
    """ Mean over every non-batch dimension. """
    return x.mean(dim = list(range(1, x.ndim)))


def q_sample(x0 : torch.Tensor, t : torch.Tensor, eps : torch.Tensor, sched : NoiseSchedule) -> torch.Tensor:
    """
    x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
    """
    alpha_bar = sched.extract("alphas_bar", t, x0)

    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps


def q_posterior(x0 : torch.Tensor, x_t : torch.Tensor, t : torch.Tensor, sched : NoiseSchedule) -> tuple:
    """
    Mean and variance of q(x_{t-1} | x_t, x0).

    Returns:

        - `(mean, variance)`      {tuple}      : `variance` is beta_tilde_t broadcast to x_t's shape
                                                 (exactly 0 at t = 1).
    """
    mean     = sched.extract("posterior_coef_x0", t, x_t) * x0 + sched.extract("posterior_coef_xt", t, x_t) * x_t
    variance = sched.extract("betas_tilde", t, x_t).expand_as(x_t)

    return mean, variance


def mu_from_eps(x_t : torch.Tensor, t : torch.Tensor, eps_hat : torch.Tensor, sched : NoiseSchedule) -> torch.Tensor:
    """
    Reverse mean from a noise prediction: (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t)
    """
    beta      = sched.extract("betas", t, x_t)
    alpha     = sched.extract("alphas", t, x_t)
    alpha_bar = sched.extract("alphas_bar", t, x_t)

    return (x_t - beta / (1.0 - alpha_bar).sqrt() * eps_hat) / alpha.sqrt()


def squash_v(raw : torch.Tensor) -> torch.Tensor:
    """ Map the variance head output to an interpolation weight in [0, 1]. """
    return ((raw + 1.0) / 2.0).clamp(0.0, 1.0)


def log_sigma_from_v(v : torch.Tensor, t : torch.Tensor, sched : NoiseSchedule) -> torch.Tensor:
    log_beta       = sched.extract("betas", t, v).log()
    log_beta_tilde = sched.extract("log_betas_tilde", t, v)

    return v * log_beta + (1.0 - v) * log_beta_tilde


def sigma_from_v(v : torch.Tensor, t : torch.Tensor, sched : NoiseSchedule) -> torch.Tensor:
    """
    Sigma = exp(v ln beta_t + (1 - v) ln beta_tilde_t), with beta_tilde_1 floored to beta_tilde_2.
    """
    return torch.exp(log_sigma_from_v(v, t, sched))


def normal_kl(mean1 : torch.Tensor, logvar1 : torch.Tensor, mean2 : torch.Tensor, logvar2 : torch.Tensor) -> torch.Tensor:
    """
    Element-wise KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))) in nats.
    """
    mean1, logvar1, mean2, logvar2 = (torch.as_tensor(x, dtype = torch.get_default_dtype()) if not isinstance(x, torch.Tensor) else x for x in (mean1, logvar1, mean2, logvar2))

    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2) + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def gaussian_kl(mu1 : torch.Tensor, var1 : torch.Tensor, mu2 : torch.Tensor, var2 : torch.Tensor) -> torch.Tensor:
    """
    Diagonal-Gaussian KL summed over every non-batch dimension; one value per batch row.
    """
    kl = normal_kl(mu1, torch.log(torch.as_tensor(var1)), mu2, torch.log(torch.as_tensor(var2)))

    return kl.sum(dim = list(range(1, kl.ndim))) if kl.ndim > 1 else kl.sum()


def standard_normal_cdf(x : torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def decoder_nll(x0 : torch.Tensor, mean : torch.Tensor, log_variance : torch.Tensor) -> torch.Tensor:
    """
    Element-wise negative log-likelihood of x0 under a Gaussian discretized into 256 bins on [-1, 1].

    The edge bins extend to -inf and +inf. Result in nats.
    """
    centred           = x0 - mean
    inv_std           = torch.exp(-0.5 * log_variance)
    cdf_plus          = standard_normal_cdf(inv_std * (centred + BIN_HALF_WIDTH))
    cdf_min           = standard_normal_cdf(inv_std * (centred - BIN_HALF_WIDTH))

    log_cdf_plus      = torch.log(cdf_plus.clamp(min = 1e-12))
    log_one_minus_min = torch.log((1.0 - cdf_min).clamp(min = 1e-12))
    log_delta         = torch.log((cdf_plus - cdf_min).clamp(min = 1e-12))

    log_probs         = torch.where(x0 < -0.999, log_cdf_plus, torch.where(x0 > 0.999, log_one_minus_min, log_delta))

    return -log_probs


def prior_kl(x0 : torch.Tensor, sched : NoiseSchedule) -> torch.Tensor:
    """
    KL(q(x_T | x0) || N(0, I)) averaged over pixels, one value per row. No model parameter enters.
    """
    t         = torch.full((x0.shape[0],), sched.T, dtype = torch.long, device = x0.device)
    alpha_bar = sched.extract("alphas_bar", t, x0)
    kl        = normal_kl(alpha_bar.sqrt() * x0, torch.log(1.0 - alpha_bar).expand_as(x0), torch.zeros_like(x0), torch.zeros_like(x0))

    return mean_flat(kl)


@dataclass
class ModelPrediction:
    eps          : torch.Tensor
    v            : torch.Tensor
    mean         : torch.Tensor
    log_variance : torch.Tensor


def p_mean_variance(model, x_t : torch.Tensor, t : torch.Tensor, contexts, sched : NoiseSchedule, guidance_weight : float = 0.0) -> ModelPrediction:
    """
    Reverse-step Gaussian parameters from the denoiser.

    `model(x_t, t, contexts)` returns the noise prediction and the raw variance channel. With a
    non-zero `guidance_weight` and contexts present, the noise estimate is
    (1 + w) eps(x_t | contexts) - w eps(x_t | no contexts).
    """
    eps_hat, v_raw = model(x_t, t, contexts)

    if guidance_weight and contexts is not None:
        eps_uncond, _ = model(x_t, t, None)
        eps_hat       = (1.0 + guidance_weight) * eps_hat - guidance_weight * eps_uncond

    v              = squash_v(v_raw)

    return ModelPrediction(eps          = eps_hat,
                           v            = v,
                           mean         = mu_from_eps(x_t, t, eps_hat, sched),
                           log_variance = log_sigma_from_v(v, t, sched),
                           )


def vlb_terms(x0 : torch.Tensor, x_t : torch.Tensor, t : torch.Tensor, mean : torch.Tensor, log_variance : torch.Tensor, sched : NoiseSchedule) -> torch.Tensor:
    """
    Per-row bound term at step t, in nats per pixel: the decoder NLL at t = 1, otherwise
    KL(q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t)).
    """
    true_mean, _  = q_posterior(x0, x_t, t, sched)
    true_log_var  = sched.extract("log_betas_tilde", t, x_t).expand_as(x_t)

    kl            = mean_flat(normal_kl(true_mean, true_log_var, mean, log_variance))
    nll           = mean_flat(decoder_nll(x0, mean, log_variance))

    return torch.where(t.to(kl.device) == 1, nll, kl)


@dataclass
class LossBreakdown:
    """
    l_hybrid = l_mu + vlb_weight * l_vlb. `terms` holds the per-row bound terms when requested.
    """
    l_mu       : torch.Tensor
    l_vlb      : torch.Tensor
    l_hybrid   : torch.Tensor
    vlb_weight : float = VLB_WEIGHT
    terms      : torch.Tensor | None = None

    def as_row(self) -> dict:
        return {"l_mu" : float(self.l_mu), "l_vlb" : float(self.l_vlb), "l_hybrid" : float(self.l_hybrid)}


def loss_hybrid(model, x0 : torch.Tensor, contexts, t : torch.Tensor, eps : torch.Tensor, sched : NoiseSchedule,
                vlb_weight : float = VLB_WEIGHT, keep_terms : bool = False) -> LossBreakdown:
    """
    Hybrid objective for one batch at sampled steps.

    l_mu is the pixel-mean squared noise error. l_vlb is T times the step-t bound term plus the
    prior term, averaged over the batch; the mean prediction is detached inside it, so it only
    trains the variance channel.

    Arguments:

        - `model`                  {callable}      : Denoiser, called as model(x_t, t, contexts).

        - `x0`                  {torch.Tensor}     : Clean batch in [-1, 1].

        - `contexts`                               : Conditioning passed through to the model.

        - `t`                   {torch.Tensor}     : (B,) steps in [1, T].

        - `eps`                 {torch.Tensor}     : Noise used for the forward sample.

        - `sched`              {NoiseSchedule}     : Schedule tables.

        - `vlb_weight`             {float}         : Weight of l_vlb (0.001).

    Returns:

        - `losses`             {LossBreakdown}     : Scalar tensors l_mu, l_vlb, l_hybrid.
    """
    x_t              = q_sample(x0, t, eps, sched)
    eps_hat, v_raw   = model(x_t, t, contexts)

    l_mu             = mean_flat((eps - eps_hat) ** 2).mean()

    log_variance     = log_sigma_from_v(squash_v(v_raw), t, sched)
    frozen_mean      = mu_from_eps(x_t, t, eps_hat.detach(), sched)
    terms            = vlb_terms(x0, x_t, t, frozen_mean, log_variance, sched)

    l_vlb            = (sched.T * terms + prior_kl(x0, sched)).mean()
    l_hybrid         = l_mu + vlb_weight * l_vlb

    return LossBreakdown(l_mu       = l_mu,
                         l_vlb      = l_vlb,
                         l_hybrid   = l_hybrid,
                         vlb_weight = vlb_weight,
                         terms      = terms.detach() if keep_terms else None,
                         )


@dataclass
class SampleResult:
    """
    `images` are uint8 (n, H, W) bitmaps; `snapshots` maps a count of completed denoising steps to
    the intermediate bitmaps at that point; `final` is the clamped model-range tensor.
    """
    images    : np.ndarray
    final     : torch.Tensor
    snapshots : dict = field(default_factory = dict)


def _set_eval(model) -> bool:
    was_training = bool(getattr(model, "training", False))

    if hasattr(model, "eval"):
        model.eval()

    return was_training


def p_sample_loop(model, contexts, n : int, sched : NoiseSchedule, generator : torch.Generator | None = None,
                  shape : tuple = (1, PADDED_SIZE, PADDED_SIZE), crop : int = IMAGE_SIZE, snapshot_steps : tuple = (),
                  guidance_weight : float = 0.0, device : str | torch.device = "cpu", dtype : torch.dtype = torch.float32,
                  progress : bool = False) -> SampleResult:
    """
    Ancestral sampling from pure noise down to t = 1.

    x_{t-1} = mu_theta + sqrt(Sigma_theta) z with z = 0 at the last step. All noise comes from
    `generator`, so a fixed seed reproduces the batch exactly.

    Arguments:

        - `model`                     {callable}        : Denoiser, called as model(x_t, t, contexts).

        - `contexts`                                    : Conditioning for all n rows, or None.

        - `n`                            {int}          : Batch size.

        - `generator`            {torch.Generator}      : CPU random stream.

        - `snapshot_steps`              {tuple}         : Counts of completed reverse steps to export (1..T).

        - `guidance_weight`             {float}         : 0 keeps plain conditional sampling.

    Returns:

        - `result`                 {SampleResult}       : Final bitmaps, snapshots and the clamped tensor.

    Raises:

        - `NumericalFailureError`                       : A non-finite state; carries the diffusion step.
    """
    wanted        = set(int(step) for step in snapshot_steps)

    if any(step < 1 or step > sched.T for step in wanted):
        raise ConfigurationError(f"snapshot steps must lie in [1, {sched.T}], got {sorted(wanted)}")

    was_training  = _set_eval(model)
    snapshots     = {}
    x             = torch.randn((n, *shape), generator = generator, dtype = dtype).to(device)

    try:
        with torch.no_grad():
            steps = range(sched.T, 0, -1)

            for done, t_value in enumerate(tqdm(steps, desc = "sampling", disable = not progress), start = 1):
                t          = torch.full((n,), t_value, dtype = torch.long, device = device)
                prediction = p_mean_variance(model, x, t, contexts, sched, guidance_weight)

                if t_value > 1:
                    noise  = torch.randn(x.shape, generator = generator, dtype = dtype).to(device)
                    x      = prediction.mean + torch.exp(0.5 * prediction.log_variance) * noise

                else:
                    x      = prediction.mean

                if not torch.isfinite(x).all():
                    raise NumericalFailureError("non-finite sampling state", step = t_value)

                if done in wanted:
                    snapshots[done] = to_pixel_range(crop_from_canvas(x, crop))

    except NumericalFailureError as e:
        diffusion_logger.error(f"Error while sampling: {repr(e)}")

        raise

    finally:
        if was_training and hasattr(model, "train"):
            model.train()

    final         = x.clamp(-1.0, 1.0)

    return SampleResult(images = to_pixel_range(crop_from_canvas(final, crop)), final = final, snapshots = snapshots)


def calc_vlb(model, x0 : torch.Tensor, contexts, sched : NoiseSchedule, generator : torch.Generator | None = None) -> dict:
    """
    Full variational bound per row, summing every step term and the prior term (nats per pixel).

    Returns:

        - `bound`          {dict}      : "terms" (B, T) with column t-1 holding step t, "prior" (B,), "total" (B,).
    """
    rows         = x0.shape[0]
    terms        = torch.zeros((rows, sched.T), dtype = x0.dtype, device = x0.device)
    was_training = _set_eval(model)

    try:
        with torch.no_grad():
            for t_value in range(sched.T, 0, -1):
                t                     = torch.full((rows,), t_value, dtype = torch.long, device = x0.device)
                eps                   = torch.randn(x0.shape, generator = generator, dtype = x0.dtype).to(x0.device)
                x_t                   = q_sample(x0, t, eps, sched)
                prediction            = p_mean_variance(model, x_t, t, contexts, sched)
                terms[:, t_value - 1] = vlb_terms(x0, x_t, t, prediction.mean, prediction.log_variance, sched)

    finally:
        if was_training and hasattr(model, "train"):
            model.train()

    prior        = prior_kl(x0, sched)

    return {"terms" : terms, "prior" : prior, "total" : terms.sum(dim = 1) + prior}
