# DISPLACEMENT-CONTROLLED NEWTON SOLVER FOR UNIAXIAL EXTENSION

# DEPENDENCIES

import struct
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from tqdm import tqdm
from pathlib import Path
from dataclasses import dataclass
from concurrent.futures import ProcessPoolExecutor

from config.config import NEWTON_TOL
from config.config import MAX_NEWTON
from config.config import NEWTON_ATOL
from config.config import SUBDIVISION
from config.config import NUM_LOAD_STEPS
from config.config import BISECTION_DEPTH
from config.config import MAX_DISPLACEMENT
from logger.logger import LoggerSetup
from src.fem_solver.mesh import Mesh
from src.fem_solver.mesh import build_mesh
from src.fem_solver.neo_hookean import tangent
from src.fem_solver.neo_hookean import psi_density
from src.fem_solver.neo_hookean import first_piola
from src.mnist_data.curves import EnergyCurve
from src.mnist_data.material import PropertyField
from src.utils.exceptions import ContractError
from src.utils.exceptions import ElementInversionError
from src.utils.exceptions import NonConvergenceError

# LOGGER SETUP
solver_logger = LoggerSetup(logger_name = "solver.py", log_filename_prefix = "solver").get_logger()

DUMP_HEADER   = "<4i"


@dataclass(frozen = True)
class LoadSchedule:
    """
    Applied top displacements of a uniaxial extension test, starting at 0.
    """
    displacements : np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.displacements, dtype = np.float64)

        if values.ndim != 1 or values.size < 2 or values[0] != 0.0 or np.any(np.diff(values) <= 0.0):
            raise ContractError("a load schedule must start at 0 and increase strictly")

        object.__setattr__(self, "displacements", values)

    @classmethod
    def canonical(cls, steps : int = NUM_LOAD_STEPS, max_displacement : float = MAX_DISPLACEMENT) -> "LoadSchedule":
        return cls(np.linspace(0.0, max_displacement, steps))

    def __len__(self) -> int:
        return int(self.displacements.size)


@dataclass
class NewtonSettings:
    tol             : float = NEWTON_TOL
    atol            : float = NEWTON_ATOL
    max_iter        : int   = MAX_NEWTON
    bisection_depth : int   = BISECTION_DEPTH
    max_backtracks  : int   = 8


@dataclass
class DeformationState:
    """
    Nodal displacements at one applied top displacement.

    `displacement` is a flat (2 * num_nodes,) vector ordered (u_x, u_y) per node. `energy` is the
    total strain energy of the state.
    """
    displacement : np.ndarray
    applied      : float = 0.0
    converged    : bool  = True
    newton_iters : int   = 0
    energy       : float = 0.0

    @classmethod
    def zero(cls, mesh : Mesh) -> "DeformationState":
        return cls(displacement = np.zeros(mesh.num_dofs))


class UniaxialExtension:
    """
    Bottom edge clamped in both directions, top edge moved vertically by the applied value with its
    horizontal component held at 0. Lateral edges are traction free.
    """

    def prescribed_dofs(self, mesh : Mesh) -> np.ndarray:
        nodes = np.concatenate([mesh.bottom_nodes, mesh.top_nodes])

        return np.stack([2 * nodes, 2 * nodes + 1], axis = 1).ravel()

    def prescribed_values(self, mesh : Mesh, applied : float) -> np.ndarray:
        values                           = np.zeros((mesh.bottom_nodes.size + mesh.top_nodes.size, 2))
        values[mesh.bottom_nodes.size:, 1] = applied

        return values.ravel()

    def predictor(self, mesh : Mesh, applied : float) -> np.ndarray:
        """ Linear vertical stretch field, exact for a homogeneous bar without lateral contraction. """
        guess        = np.zeros((mesh.num_nodes, 2))
        guess[:, 1]  = applied * mesh.nodes[:, 1] / mesh.height

        return guess.ravel()


class AffineBoundary:
    """
    u = applied * H X prescribed on the whole boundary, with H a constant displacement gradient.

    For a homogeneous body the affine field is an exact equilibrium, so this loading is the
    analytic check of the assembly.
    """

    def __init__(self, displacement_gradient : np.ndarray) -> None:
        self.displacement_gradient = np.asarray(displacement_gradient, dtype = np.float64)

        if self.displacement_gradient.shape != (2, 2):
            raise ContractError(f"displacement gradient must be 2x2, got {self.displacement_gradient.shape}")

    def prescribed_dofs(self, mesh : Mesh) -> np.ndarray:
        nodes = mesh.boundary_nodes

        return np.stack([2 * nodes, 2 * nodes + 1], axis = 1).ravel()

    def prescribed_values(self, mesh : Mesh, applied : float) -> np.ndarray:
        return self.predictor(mesh, applied).reshape(-1, 2)[mesh.boundary_nodes].ravel()

    def predictor(self, mesh : Mesh, applied : float) -> np.ndarray:
        return (applied * mesh.nodes @ self.displacement_gradient.T).ravel()


def deformation_gradients(mesh : Mesh, displacement : np.ndarray) -> np.ndarray:
    """ F at every quadrature point, shape (num_elements, 3, 2, 2). """
    grads, _      = mesh.quadrature
    nodal         = np.asarray(displacement, dtype = np.float64)[mesh.element_dofs].reshape(mesh.num_elements, 6, 2)

    return np.eye(2) + np.einsum("mai,mqaJ->mqiJ", nodal, grads)


def total_energy(mesh : Mesh, displacement : np.ndarray) -> float:
    """
    Quadrature of the strain energy density over the mesh.
    """
    _, weights    = mesh.quadrature
    F             = deformation_gradients(mesh, displacement)
    psi           = psi_density(F, mesh.lame_lambda[:, None], mesh.lame_mu[:, None])

    return float(np.sum(weights * psi))


def assemble(mesh : Mesh, displacement : np.ndarray, with_jacobian : bool = True) -> tuple:
    """
    Global internal-force residual, consistent tangent and total strain energy.

    Element contributions are scattered with `np.bincount` and a COO matrix converted to CSR,
    which sums duplicates in a fixed order; the result is deterministic.

    Arguments:

        - `mesh`                  {Mesh}           : Quadratic triangle mesh.

        - `displacement`       {np.ndarray}        : Flat nodal displacement vector.

        - `with_jacobian`          {bool}          : Skip the tangent when only residual and energy are needed.

    Returns:

        - `(residual, jacobian, energy)`  {tuple}  : (n,) array, (n, n) CSR matrix or None, float.

    Raises:

        - `ElementInversionError`                  : If det F <= 0 at any quadrature point.
    """
    grads, weights   = mesh.quadrature
    F                = deformation_gradients(mesh, displacement)
    lam, mu          = mesh.lame_lambda[:, None], mesh.lame_mu[:, None]

    energy           = float(np.sum(weights * psi_density(F, lam, mu)))
    stress           = first_piola(F, lam, mu)

    element_forces   = np.einsum("mq,mqiJ,mqaJ->mai", weights, stress, grads).reshape(mesh.num_elements, 12)
    dofs             = mesh.element_dofs
    residual         = np.bincount(dofs.ravel(), weights = element_forces.ravel(), minlength = mesh.num_dofs)

    if not with_jacobian:
        return residual, None, energy

    moduli           = tangent(F, lam, mu)
    element_matrices = np.einsum("mq,mqiJkL,mqaJ,mqbL->maibk", weights, moduli, grads, grads).reshape(mesh.num_elements, 12, 12)

    rows             = np.repeat(dofs, 12, axis = 1).ravel()
    cols             = np.tile(dofs, (1, 12)).ravel()
    jacobian         = sp.coo_matrix((element_matrices.ravel(), (rows, cols)), shape = (mesh.num_dofs, mesh.num_dofs)).tocsr()

    return residual, jacobian, energy


def _newton(mesh : Mesh, prior : DeformationState, applied : float, loading, settings : NewtonSettings) -> DeformationState:
    fixed                    = loading.prescribed_dofs(mesh)
    free                     = np.setdiff1d(np.arange(mesh.num_dofs), fixed)

    u                        = prior.displacement + loading.predictor(mesh, applied) - loading.predictor(mesh, prior.applied)
    u[fixed]                 = loading.prescribed_values(mesh, applied)

    try:
        residual, jac, energy = assemble(mesh, u)

    except ElementInversionError as e:
        raise NonConvergenceError(f"predictor at u = {applied:.4g} inverts an element ({e})", residual_norm = float("inf")) from e

    reference                = float(np.linalg.norm(residual[free]))
    norm                     = reference

    if reference <= settings.atol:
        return DeformationState(u, applied, True, 0, energy)

    for iteration in range(1, settings.max_iter + 1):
        reduced              = jac[free][:, free].tocsc()
        delta                = spla.spsolve(reduced, -residual[free])
        step                 = 1.0

        for _ in range(settings.max_backtracks + 1):
            trial            = u.copy()
            trial[free]     += step * delta

            try:
                trial_state  = assemble(mesh, trial)
                break

            except ElementInversionError:
                step        *= 0.5

        else:
            raise NonConvergenceError(f"Newton update at u = {applied:.4g} keeps inverting elements", residual_norm = norm)

        u                    = trial
        residual, jac, energy = trial_state
        norm                 = float(np.linalg.norm(residual[free]))

        if not np.isfinite(norm):
            raise NonConvergenceError(f"non-finite residual at u = {applied:.4g}", residual_norm = norm)

        if norm <= max(settings.tol * reference, settings.atol):
            return DeformationState(u, applied, True, iteration, energy)

    raise NonConvergenceError(f"Newton did not converge at u = {applied:.4g} in {settings.max_iter} iterations", residual_norm = norm)


def _solve_bisected(mesh : Mesh, prior : DeformationState, applied : float, loading, settings : NewtonSettings, depth : int) -> DeformationState:
    try:
        return _newton(mesh, prior, applied, loading, settings)

    except NonConvergenceError as e:
        if depth >= settings.bisection_depth:
            raise

        midpoint = 0.5 * (prior.applied + applied)
        solver_logger.debug(f"Bisecting load increment [{prior.applied:.4g}, {applied:.4g}] at depth {depth + 1}: {e}")

        half     = _solve_bisected(mesh, prior, midpoint, loading, settings, depth + 1)
        full     = _solve_bisected(mesh, half, applied, loading, settings, depth + 1)

        full.newton_iters += half.newton_iters

        return full


def solve_step(mesh : Mesh, prior : DeformationState, applied : float, loading = None, settings : NewtonSettings | None = None) -> DeformationState:
    """
    Equilibrium at a new applied displacement, warm-started from the prior state.

    The prior solution is shifted by the loading's affine predictor increment. When Newton fails
    the increment is halved recursively up to `settings.bisection_depth` times.

    Arguments:

        - `mesh`                   {Mesh}             : Mesh of the specimen.

        - `prior`             {DeformationState}      : Converged state at a lower (or equal) load.

        - `applied`               {float}             : Target load parameter.

        - `loading`   {UniaxialExtension | AffineBoundary} : Dirichlet data; uniaxial extension by default.

        - `settings`          {NewtonSettings}        : Tolerances and limits.

    Returns:

        - `state`             {DeformationState}      : Converged state at `applied`.

    Raises:

        - `NonConvergenceError`                       : Bisection depth exhausted; carries the last residual norm.
    """
    loading  = loading if loading is not None else UniaxialExtension()
    settings = settings or NewtonSettings()

    if applied < prior.applied:
        raise ContractError(f"applied load {applied} is below the prior load {prior.applied}")

    if prior.displacement.shape != (mesh.num_dofs,):
        raise ContractError(f"prior state has {prior.displacement.size} DOFs, mesh has {mesh.num_dofs}")

    return _solve_bisected(mesh, prior, float(applied), loading, settings, depth = 0)


def dump_displacement(path : str | Path, mesh : Mesh, state : DeformationState, step : int) -> Path:
    """
    Write a displacement field on the node grid as flat binary.

    Layout: little-endian int32 header (rows, cols, components = 2, step), then rows*cols*2
    little-endian float64 values, row 0 being the bottom row of nodes.
    """
    path     = Path(path)
    cols     = 2 * mesh.subdivision * int(mesh.width) + 1
    rows     = mesh.num_nodes // cols
    header   = struct.pack(DUMP_HEADER, rows, cols, 2, int(step))

    path.parent.mkdir(parents = True, exist_ok = True)
    path.write_bytes(header + np.asarray(state.displacement, dtype = "<f8").tobytes())

    return path


def read_displacement(path : str | Path) -> tuple:
    """
    Inverse of `dump_displacement`: returns (step, field of shape (rows, cols, 2)).
    """
    raw                      = Path(path).read_bytes()
    size                     = struct.calcsize(DUMP_HEADER)
    rows, cols, comps, step  = struct.unpack(DUMP_HEADER, raw[:size])

    return step, np.frombuffer(raw[size:], dtype = "<f8").reshape(rows, cols, comps).copy()


def run_uniaxial_extension(field : PropertyField, schedule : LoadSchedule | None = None, subdivision : int = SUBDIVISION,
                           settings : NewtonSettings | None = None, normalization : float | None = None,
                           dump_dir : str | Path | None = None) -> EnergyCurve:
    """
    Energy curve of a uniaxial extension test on one property field.

    Arguments:

        - `field`              {PropertyField}      : Material layout.

        - `schedule`            {LoadSchedule}      : Applied displacements; canonical 13 steps up to 14 by default.

        - `subdivision`              {int}          : Mesh refinement factor s.

        - `settings`           {NewtonSettings}     : Newton tolerances.

        - `normalization`           {float}         : Dataset constant S; the raw curve is returned when None.

        - `dump_dir`             {str | Path}       : When set, each step's displacement field is dumped there.

    Returns:

        - `curve`               {EnergyCurve}       : Total strain energy per step.

    Raises:

        - `NonConvergenceError`                     : Carries the index of the failing load step.
    """
    schedule                = schedule if schedule is not None else LoadSchedule.canonical()
    mesh                    = build_mesh(field, subdivision)
    state                   = DeformationState.zero(mesh)
    loading                 = UniaxialExtension()
    energies                = np.zeros(len(schedule))

    for step, applied in enumerate(schedule.displacements):
        try:
            if step > 0:
                state       = solve_step(mesh, state, applied, loading, settings)

        except NonConvergenceError as e:
            solver_logger.error(f"Error solving load step {step}: {repr(e)}")

            raise NonConvergenceError(f"load step {step} (u = {applied:.4g}) failed", residual_norm = e.residual_norm, step = step) from e

        energies[step]      = state.energy

        if dump_dir is not None:
            dump_displacement(Path(dump_dir) / f"displacement_step{step:02d}.bin", mesh, state, step)

    curve                   = EnergyCurve(schedule.displacements, energies, normalized = False)

    return curve if normalization is None else curve.normalize(normalization)


def _solve_one(job : tuple) -> EnergyCurve:
    field, schedule, subdivision, settings, dump_dir = job

    return run_uniaxial_extension(field, schedule, subdivision, settings, dump_dir = dump_dir)


def solve_many(fields : list, schedule : LoadSchedule | None = None, subdivision : int = SUBDIVISION,
               settings : NewtonSettings | None = None, jobs : int = 1, dump_dirs : list | None = None) -> list:
    """
    Raw energy curves for many fields, returned in input order.

    `jobs > 1` distributes samples over worker processes; each solve is independent so the curves
    are identical to the serial run. `dump_dirs`, when given, holds one displacement-dump directory
    per field.
    """
    schedule  = schedule if schedule is not None else LoadSchedule.canonical()
    settings  = settings or NewtonSettings()
    dump_dirs = dump_dirs if dump_dirs is not None else [None] * len(fields)

    if len(dump_dirs) != len(fields):
        raise ContractError(f"{len(dump_dirs)} dump directories for {len(fields)} fields")

    work      = [(item, schedule, subdivision, settings, dump_dir) for item, dump_dir in zip(fields, dump_dirs)]

    if jobs <= 1:
        return [_solve_one(job) for job in tqdm(work, desc = "FEM", unit = "sample")]

    with ProcessPoolExecutor(max_workers = jobs) as executor:
        return list(tqdm(executor.map(_solve_one, work), total = len(work), desc = "FEM", unit = "sample"))
