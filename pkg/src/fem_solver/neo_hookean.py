# COMPRESSIBLE NEO-HOOKEAN MATERIAL UNDER PLANE STRAIN

# DEPENDENCIES

import numpy as np

from src.utils.exceptions import ElementInversionError


def _inverse_transpose(F : np.ndarray, J : np.ndarray) -> np.ndarray:
    """ F^-T of a stack of 2x2 matrices, given their determinants. """
    G             = np.empty_like(F)
    G[..., 0, 0]  =  F[..., 1, 1] / J
    G[..., 0, 1]  = -F[..., 1, 0] / J
    G[..., 1, 0]  = -F[..., 0, 1] / J
    G[..., 1, 1]  =  F[..., 0, 0] / J

    return G


def jacobian_determinant(F : np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype = np.float64)

    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


def _check_orientation(J : np.ndarray) -> None:
    if np.all(J > 0.0):
        return

    # NaN DETERMINANTS COUNT AS INVERTED
    where = tuple(int(i) for i in np.argwhere(~(J > 0.0))[0])

    raise ElementInversionError("det F <= 0", element = where[0], point = where[1:])


def psi_density(F : np.ndarray, lame_lambda : float | np.ndarray, lame_mu : float | np.ndarray) -> np.ndarray:
    """
    Strain energy density of the compressible Neo-Hookean model.

    psi = mu/2 [F:F - 3 - 2 ln J] + lambda/2 [(J^2 - 1)/2 - ln J]

    The in-plane F is embedded as diag-extended plane strain (out-of-plane stretch 1), so F:F
    carries an extra 1 and J is the in-plane determinant.

    Arguments:

        - `F`                   {np.ndarray}      : (..., 2, 2) deformation gradients.

        - `lame_lambda`   {float | np.ndarray}    : Lamé lambda, broadcast against F's leading axes.

        - `lame_mu`       {float | np.ndarray}    : Lamé mu, broadcast likewise.

    Returns:

        - `psi`                 {np.ndarray}      : Energy density per leading index.

    Raises:

        - `ElementInversionError`                 : If any det F <= 0; the leading indices of the first
                                                    offending matrix are reported as (element, point).
    """
    F      = np.asarray(F, dtype = np.float64)
    J      = jacobian_determinant(F)

    _check_orientation(np.atleast_1d(J))

    log_j  = np.log(J)
    trace  = np.sum(F * F, axis = (-2, -1)) + 1.0

    return 0.5 * lame_mu * (trace - 3.0 - 2.0 * log_j) + 0.5 * lame_lambda * (0.5 * (J ** 2 - 1.0) - log_j)


def first_piola(F : np.ndarray, lame_lambda : float | np.ndarray, lame_mu : float | np.ndarray) -> np.ndarray:
    """
    P = d psi / d F = mu F + (lambda (J^2 - 1)/2 - mu) F^-T
    """
    F      = np.asarray(F, dtype = np.float64)
    J      = jacobian_determinant(F)

    _check_orientation(np.atleast_1d(J))

    G      = _inverse_transpose(F, J)
    coeff  = 0.5 * np.asarray(lame_lambda) * (J ** 2 - 1.0) - np.asarray(lame_mu)

    return np.asarray(lame_mu)[..., None, None] * F + coeff[..., None, None] * G


def tangent(F : np.ndarray, lame_lambda : float | np.ndarray, lame_mu : float | np.ndarray) -> np.ndarray:
    """
    Consistent tangent A_iJkL = d P_iJ / d F_kL.

    With G = F^-T and c = lambda (J^2 - 1)/2:

        A = mu d_ik d_JL + (mu - c) G_iL G_kJ + lambda J^2 G_iJ G_kL

    Returns:

        - `A`            {np.ndarray}      : (..., 2, 2, 2, 2) fourth-order tangent.
    """
    F      = np.asarray(F, dtype = np.float64)
    J      = jacobian_determinant(F)

    _check_orientation(np.atleast_1d(J))

    G      = _inverse_transpose(F, J)
    lam    = np.asarray(lame_lambda, dtype = np.float64)
    mu     = np.asarray(lame_mu, dtype = np.float64)
    c      = 0.5 * lam * (J ** 2 - 1.0)

    eye    = np.eye(2)
    A      = mu[..., None, None, None, None] * np.einsum("ik,JL->iJkL", eye, eye)
    A      = A + (mu - c)[..., None, None, None, None] * np.einsum("...iL,...kJ->...iJkL", G, G)
    A      = A + (lam * J ** 2)[..., None, None, None, None] * np.einsum("...iJ,...kL->...iJkL", G, G)

    return A
