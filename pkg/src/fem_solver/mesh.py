# STRUCTURED QUADRATIC-TRIANGLE MESH OF A PROPERTY FIELD

# DEPENDENCIES

import numpy as np
from functools import cached_property
from dataclasses import dataclass

from logger.logger import LoggerSetup
from src.mnist_data.material import PropertyField
from src.utils.exceptions import ConfigurationError

# LOGGER SETUP
mesh_logger = LoggerSetup(logger_name = "mesh.py", log_filename_prefix = "mesh").get_logger()

# 3-POINT RULE ON THE REFERENCE TRIANGLE (EXACT FOR QUADRATICS), WEIGHTS SUM TO THE REFERENCE AREA 1/2
QUADRATURE_POINTS  = np.array([[1.0 / 6.0, 1.0 / 6.0],
                               [2.0 / 3.0, 1.0 / 6.0],
                               [1.0 / 6.0, 2.0 / 3.0],
                               ])
QUADRATURE_WEIGHTS = np.full(3, 1.0 / 6.0)


def p2_shape_gradients(xi : float, eta : float) -> np.ndarray:
    """
    Reference-coordinate gradients of the six P2 shape functions.

    Node order: vertices v0, v1, v2, then edge midpoints m01, m12, m20.

    Returns:

        - `dN`           {np.ndarray}      : (6, 2) array of (dN/dxi, dN/deta).
    """
    zeta = 1.0 - xi - eta

    return np.array([[-(4.0 * zeta - 1.0),       -(4.0 * zeta - 1.0)],
                     [4.0 * xi - 1.0,             0.0],
                     [0.0,                        4.0 * eta - 1.0],
                     [4.0 * (zeta - xi),         -4.0 * xi],
                     [4.0 * eta,                  4.0 * xi],
                     [-4.0 * eta,                 4.0 * (zeta - eta)],
                     ])


@dataclass(eq = False)
class Mesh:
    """
    Quadratic (6-node) triangle mesh of a rectangular specimen.

    Coordinates are in length units with one pixel per unit; y = 0 is the bottom edge.
    `element_pixel` gives the (row, col) of the owning pixel so per-element moduli are those
    of the pixel.
    """
    nodes         : np.ndarray
    elements      : np.ndarray
    lame_lambda   : np.ndarray
    lame_mu       : np.ndarray
    element_pixel : np.ndarray
    bottom_nodes  : np.ndarray
    top_nodes     : np.ndarray
    boundary_nodes: np.ndarray
    width         : float
    height        : float
    subdivision   : int

    @property
    def num_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def num_elements(self) -> int:
        return int(self.elements.shape[0])

    @property
    def num_dofs(self) -> int:
        return 2 * self.num_nodes

    @cached_property
    def quadrature(self) -> tuple:
        """
        Physical shape-function gradients and integration weights.

        Returns:

            - `(grads, weights)`        {tuple}      : grads (m, q, 6, 2) = dN_a/dX_J;
                                                       weights (m, q) = w_q * det J.
        """
        coords      = self.nodes[self.elements]
        grads       = []
        weights     = []

        for (xi, eta), weight in zip(QUADRATURE_POINTS, QUADRATURE_WEIGHTS):
            d_ref   = p2_shape_gradients(xi, eta)
            jac     = np.einsum("maI,aJ->mIJ", coords, d_ref)
            det_j   = np.linalg.det(jac)
            inv_jac = np.linalg.inv(jac)
            grads.append(np.einsum("aJ,mJI->maI", d_ref, inv_jac))
            weights.append(weight * det_j)

        return np.stack(grads, axis = 1), np.stack(weights, axis = 1)

    @property
    def area(self) -> float:
        return float(self.quadrature[1].sum())

    @cached_property
    def element_dofs(self) -> np.ndarray:
        """ (m, 12) global DOF indices in (node, component) order. """
        return np.stack([2 * self.elements, 2 * self.elements + 1], axis = -1).reshape(self.num_elements, 12)


def build_mesh(field : PropertyField, subdivision : int = 2) -> Mesh:
    """
    Mesh a property field with 2*s^2 quadratic triangles per pixel.

    Each pixel is cut into s x s squares and every square into two counter-clockwise triangles
    along its rising diagonal. P2 nodes live on a uniform grid of spacing 1/(2s), so the whole
    grid is used and shared edges share midpoints.

    Arguments:

        - `field`           {PropertyField}      : Per-pixel Lamé parameters.

        - `subdivision`          {int}           : Squares per pixel edge, s >= 1.

    Returns:

        - `mesh`                 {Mesh}          : Mesh with per-element moduli and boundary tags.
    """
    if subdivision < 1:
        raise ConfigurationError(f"subdivision must be >= 1, got {subdivision}")

    rows, cols                = field.shape
    s                         = int(subdivision)
    nx, ny                    = 2 * s * cols + 1, 2 * s * rows + 1

    # FINE GRID OF P2 NODES, INDEX = j * nx + i
    gx, gy                    = np.meshgrid(np.arange(nx) / (2.0 * s), np.arange(ny) / (2.0 * s))
    nodes                     = np.stack([gx.ravel(), gy.ravel()], axis = 1)

    # LOWER-LEFT FINE-GRID CORNER OF EVERY SUB-SQUARE
    sq_j, sq_i                = np.meshgrid(np.arange(rows * s), np.arange(cols * s), indexing = "ij")
    sq_i, sq_j                = 2 * sq_i.ravel(), 2 * sq_j.ravel()

    def node(di, dj):
        return (sq_j + dj) * nx + (sq_i + di)

    lower                     = np.stack([node(0, 0), node(2, 0), node(2, 2), node(1, 0), node(2, 1), node(1, 1)], axis = 1)
    upper                     = np.stack([node(0, 0), node(2, 2), node(0, 2), node(1, 1), node(1, 2), node(0, 1)], axis = 1)
    elements                  = np.stack([lower, upper], axis = 1).reshape(-1, 6)

    # OWNING PIXEL: SQUARE ROW COUNTED FROM THE BOTTOM, IMAGE ROW 0 IS THE TOP
    pixel_row                 = rows - 1 - (sq_j // 2) // s
    pixel_col                 = (sq_i // 2) // s
    element_pixel             = np.repeat(np.stack([pixel_row, pixel_col], axis = 1), 2, axis = 0)

    lame_lambda               = field.lame_lambda[element_pixel[:, 0], element_pixel[:, 1]]
    lame_mu                   = field.lame_mu[element_pixel[:, 0], element_pixel[:, 1]]

    ids                       = np.arange(nx * ny).reshape(ny, nx)
    bottom_nodes              = ids[0, :].copy()
    top_nodes                 = ids[-1, :].copy()
    boundary_nodes            = np.unique(np.concatenate([ids[0, :], ids[-1, :], ids[:, 0], ids[:, -1]]))

    mesh                      = Mesh(nodes          = nodes,
                                     elements       = elements,
                                     lame_lambda    = lame_lambda,
                                     lame_mu        = lame_mu,
                                     element_pixel  = element_pixel,
                                     bottom_nodes   = bottom_nodes,
                                     top_nodes      = top_nodes,
                                     boundary_nodes = boundary_nodes,
                                     width          = float(cols),
                                     height         = float(rows),
                                     subdivision    = s,
                                     )

    mesh_logger.info(f"Built mesh: {mesh.num_elements} quadratic triangles, {mesh.num_nodes} nodes (s = {s})")

    return mesh
