# CUBIC ENERGY POLYNOMIALS: FIT, SAMPLE, EVALUATE

# DEPENDENCIES

import numpy as np
import scipy.linalg
from dataclasses import dataclass

from config.config import COEFFICIENT_RANGES
from config.config import MAX_DISPLACEMENT
from config.config import NUM_LOAD_STEPS
from logger.logger import LoggerSetup
from src.mnist_data.curves import EnergyCurve
from src.utils.exceptions import ContractError
from src.utils.exceptions import ConfigurationError

# LOGGER SETUP
polynomial_logger = LoggerSetup(logger_name = "polynomial.py", log_filename_prefix = "polynomial").get_logger()


@dataclass(frozen = True)
class PolyCoeffs:
    """
    Coefficients of a*x^3 + b*x^2 + c*x, x being the applied displacement over its maximum.
    """
    a : float
    b : float
    c : float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype = np.float64)

    def in_range(self, ranges : dict = COEFFICIENT_RANGES) -> bool:
        """ True when every coefficient lies inside its closed interval. """
        return all(ranges[name][0] <= value <= ranges[name][1] for name, value in zip("abc", self.as_array()))

    def __str__(self) -> str:
        return f"{self.a:+.4g}x^3 {self.b:+.4g}x^2 {self.c:+.4g}x"


def _design_matrix(xs : np.ndarray) -> np.ndarray:
    return np.stack([xs ** 3, xs ** 2, xs], axis = 1)


def fit_cubic(curve : EnergyCurve) -> tuple:
    """
    Least-squares fit of a*x^3 + b*x^2 + c*x (no constant term) to a curve.

    The abscissa is `curve.abscissa` (displacement over its maximum). The solve goes through
    `scipy.linalg.lstsq`, an SVD-based rank-revealing solver; a rank-deficient system or an
    all-zero curve yields zero coefficients.

    Arguments:

        - `curve`          {EnergyCurve}      : Normalized energy curve.

    Returns:

        - `(coeffs, residual)`   {tuple}      : `PolyCoeffs` and the residual 2-norm of the fit.
    """
    xs                                = curve.abscissa
    ys                                = curve.energies

    if not np.any(ys):
        return PolyCoeffs(0.0, 0.0, 0.0), 0.0

    design                            = _design_matrix(xs)
    solution, _, rank, _              = scipy.linalg.lstsq(design, ys, lapack_driver = "gelsd")

    if rank < 3:
        polynomial_logger.warning(f"Degenerate cubic design matrix (rank {rank}); returning zero coefficients")

        return PolyCoeffs(0.0, 0.0, 0.0), 0.0

    residual                          = float(np.linalg.norm(design @ solution - ys))

    return PolyCoeffs(*(float(v) for v in solution)), residual


def coefficient_ranges(fits : list) -> dict:
    """
    Closed intervals spanned by a collection of fitted coefficients.
    """
    if not fits:
        raise ContractError("cannot compute coefficient ranges of an empty fit list")

    stacked = np.stack([coeffs.as_array() for coeffs in fits])

    return {name : (float(stacked[:, i].min()), float(stacked[:, i].max())) for i, name in enumerate("abc")}


def sample_polynomial(ranges : dict = COEFFICIENT_RANGES, rng : np.random.Generator | None = None) -> PolyCoeffs:
    """
    Draw each coefficient uniformly from its interval.

    Arguments:

        - `ranges`                  {dict}          : {"a": (lo, hi), "b": ..., "c": ...}.

        - `rng`          {np.random.Generator}      : Seeded stream; the result is deterministic under a fixed seed.

    Raises:

        - `ConfigurationError`                      : Missing key or an interval with lo > hi.
    """
    if rng is None:
        rng        = np.random.default_rng()

    values         = []

    for name in "abc":
        if name not in ranges:
            raise ConfigurationError(f"coefficient range for {name!r} is missing")

        low, high  = (float(bound) for bound in ranges[name])

        if low > high:
            raise ConfigurationError(f"empty interval for {name!r}: [{low}, {high}]")

        values.append(low if low == high else float(rng.uniform(low, high)))

    return PolyCoeffs(*values)


def eval_polynomial(coeffs : PolyCoeffs, xs : np.ndarray | None = None, max_displacement : float = MAX_DISPLACEMENT) -> EnergyCurve:
    """
    Evaluate a cubic target on normalized displacements and return it as a normalized curve.

    Arguments:

        - `coeffs`              {PolyCoeffs}      : Cubic coefficients.

        - `xs`                  {np.ndarray}      : Increasing abscissae in [0, 1] starting at 0;
                                                    defaults to the 13-step canonical schedule.

        - `max_displacement`       {float}        : Length units corresponding to x = 1.

    Returns:

        - `curve`              {EnergyCurve}      : psi_i = a*x_i^3 + b*x_i^2 + c*x_i.
    """
    if xs is None:
        xs         = np.linspace(0.0, 1.0, NUM_LOAD_STEPS)

    xs             = np.asarray(xs, dtype = np.float64)

    if xs.min() < 0.0 or xs.max() > 1.0:
        raise ContractError("polynomial abscissae must lie in [0, 1]")

    energies       = _design_matrix(xs) @ coeffs.as_array()

    return EnergyCurve(xs * max_displacement, energies, normalized = True)
