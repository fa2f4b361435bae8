# GRAYSCALE TO NEO-HOOKEAN MATERIAL PARAMETERS

# DEPENDENCIES

import numpy as np
from dataclasses import dataclass

from config.config import YOUNG_MIN
from config.config import YOUNG_MAX
from config.config import POISSON_RATIO
from src.mnist_data.idx_reader import Bitmap
from src.utils.exceptions import IncompressibilityError


@dataclass(frozen = True)
class PropertyField:
    """
    Per-pixel material parameters derived from a bitmap.

    `young`, `lame_lambda` and `lame_mu` share the bitmap's (height, width) layout; row 0 is the
    top of the specimen.
    """
    bitmap      : Bitmap
    young       : np.ndarray
    lame_lambda : np.ndarray
    lame_mu     : np.ndarray
    poisson     : float = POISSON_RATIO

    @property
    def shape(self) -> tuple:
        return self.young.shape


def young_modulus(beta : np.ndarray) -> np.ndarray:
    """
    E = beta / 255 * (E_max - E_min) + E_min, affine in the grayscale value.
    """
    beta = np.asarray(beta, dtype = np.float64)

    return beta / 255.0 * (YOUNG_MAX - YOUNG_MIN) + YOUNG_MIN


def lame_parameters(young : np.ndarray, poisson : float = POISSON_RATIO) -> tuple:
    """
    Lamé (lambda, mu) from Young's modulus and Poisson's ratio.

    Raises:

        - `IncompressibilityError`      : If poisson >= 0.5 (lambda diverges) or poisson <= 0.
    """
    if poisson >= 0.5:
        raise IncompressibilityError(f"Poisson's ratio {poisson} makes the material incompressible")

    if poisson <= 0.0:
        raise IncompressibilityError(f"Poisson's ratio must be positive, got {poisson}")

    young       = np.asarray(young, dtype = np.float64)
    lame_lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    lame_mu     = young / (2.0 * (1.0 + poisson))

    return lame_lambda, lame_mu


def to_property_field(bitmap : Bitmap, poisson : float = POISSON_RATIO) -> PropertyField:
    """
    Map a grayscale bitmap to its Young's modulus and Lamé fields.

    Arguments:

        - `bitmap`          {Bitmap}       : Grayscale microstructure, 0 = soft matrix, 255 = stiff inclusion.

        - `poisson`          {float}       : Constant Poisson's ratio, 0 < nu < 0.5.

    Returns:

        - `field`        {PropertyField}   : E in [1, 100] plus lambda and mu per pixel.
    """
    if not isinstance(bitmap, Bitmap):
        bitmap               = Bitmap(np.asarray(bitmap))

    young                    = young_modulus(bitmap.values)
    lame_lambda, lame_mu     = lame_parameters(young, poisson)

    return PropertyField(bitmap       = bitmap,
                         young        = young,
                         lame_lambda  = lame_lambda,
                         lame_mu      = lame_mu,
                         poisson      = poisson,
                         )
