import numpy as np
import pytest

from src.fem_solver.mesh import build_mesh
from src.fem_solver.solver import LoadSchedule
from src.fem_solver.solver import NewtonSettings
from src.fem_solver.solver import AffineBoundary
from src.fem_solver.solver import DeformationState
from src.fem_solver.solver import assemble
from src.fem_solver.solver import solve_many
from src.fem_solver.solver import solve_step
from src.fem_solver.solver import total_energy
from src.fem_solver.solver import read_displacement
from src.fem_solver.solver import dump_displacement
from src.fem_solver.solver import run_uniaxial_extension
from src.fem_solver.neo_hookean import tangent
from src.fem_solver.neo_hookean import psi_density
from src.fem_solver.neo_hookean import first_piola
from src.mnist_data.idx_reader import Bitmap
from src.mnist_data.material import to_property_field
from src.utils.exceptions import ContractError
from src.utils.exceptions import NonConvergenceError
from src.utils.exceptions import ElementInversionError


def _uniform_field(beta, size = 2):
    return to_property_field(Bitmap(np.full((size, size), beta, dtype = np.uint8)))


def _random_gradients(rng, count, spread = 0.4):
    F = np.eye(2) + spread * rng.standard_normal((count, 2, 2))

    return F[np.linalg.det(F) > 0.05]


# -------------------------
# MESH
# -------------------------

@pytest.mark.parametrize("subdivision, expected", [(1, 1568), (5, 39200)])
def test_element_counts_on_mnist_grid(subdivision, expected):
    mesh = build_mesh(_uniform_field(0, size = 28), subdivision)

    assert mesh.num_elements == expected


def test_single_pixel_mesh():
    mesh = build_mesh(_uniform_field(0, size = 1), 1)

    assert mesh.num_elements == 2
    assert mesh.num_nodes == 9
    assert np.unique(mesh.elements).size == 9


def test_mesh_geometry(small_bitmap):
    mesh              = build_mesh(to_property_field(small_bitmap), 2)
    _, weights        = mesh.quadrature

    assert np.all(weights > 0.0)
    assert mesh.area == pytest.approx(16.0, rel = 1e-13)
    assert np.all(mesh.nodes[mesh.bottom_nodes, 1] == 0.0)
    assert np.all(mesh.nodes[mesh.top_nodes, 1] == 4.0)


def test_element_moduli_follow_owning_pixel(small_bitmap):
    field    = to_property_field(small_bitmap)
    mesh     = build_mesh(field, 2)
    centroid = mesh.nodes[mesh.elements[:, :3]].mean(axis = 1)
    stiff    = centroid[:, 0] < 2.0

    np.testing.assert_allclose(mesh.lame_mu[stiff], field.lame_mu.max())
    np.testing.assert_allclose(mesh.lame_mu[~stiff], field.lame_mu.min())


def test_pixel_rows_count_from_the_top():
    values       = np.zeros((2, 1), dtype = np.uint8)
    values[0, 0] = 255
    mesh         = build_mesh(to_property_field(Bitmap(values)), 1)
    centroid     = mesh.nodes[mesh.elements[:, :3]].mean(axis = 1)

    assert np.all(mesh.lame_mu[centroid[:, 1] > 1.0] > mesh.lame_mu[centroid[:, 1] < 1.0])


# -------------------------
# MATERIAL LAW
# -------------------------

def test_psi_identity_is_zero():
    assert psi_density(np.eye(2), 3.0, 2.0) == pytest.approx(0.0, abs = 1e-15)


def test_psi_isochoric_stretch():
    assert psi_density(np.diag([2.0, 0.5]), 1.0, 1.0) == pytest.approx(1.125, rel = 1e-14)


def test_psi_diverges_as_volume_vanishes():
    assert psi_density(np.diag([1.0, 1e-12]), 1.0, 1.0) > 10.0


def test_psi_rejects_inverted_gradient():
    F        = np.stack([np.eye(2), np.diag([1.0, -0.5])])[None]

    with pytest.raises(ElementInversionError) as info:
        psi_density(F, 1.0, 1.0)

    assert info.value.element == 0
    assert info.value.point == (1,)


def test_psi_non_negative(rng):
    F   = _random_gradients(rng, 10_000)
    psi = psi_density(F, rng.uniform(0.1, 10.0, len(F)), rng.uniform(0.1, 10.0, len(F)))

    assert np.all(psi >= -1e-12)


def test_psi_vanishes_on_rotations():
    angle = 0.7
    R     = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])

    assert psi_density(R, 5.0, 2.0) == pytest.approx(0.0, abs = 1e-13)


def test_stress_free_reference_by_finite_differences():
    h         = 1e-6
    gradient  = np.zeros((2, 2))

    for i in range(2):
        for j in range(2):
            bump        = np.zeros((2, 2))
            bump[i, j]  = h
            gradient[i, j] = (psi_density(np.eye(2) + bump, 1.0, 1.0) - psi_density(np.eye(2) - bump, 1.0, 1.0)) / (2 * h)

    assert np.linalg.norm(gradient) <= 1e-7
    np.testing.assert_allclose(first_piola(np.eye(2), 1.0, 1.0), 0.0, atol = 1e-15)


def test_first_piola_matches_energy_derivative(rng):
    h  = 1e-6

    for F in _random_gradients(rng, 5, spread = 0.2):
        numeric = np.zeros((2, 2))

        for i in range(2):
            for j in range(2):
                bump          = np.zeros((2, 2))
                bump[i, j]    = h
                numeric[i, j] = (psi_density(F + bump, 2.0, 0.7) - psi_density(F - bump, 2.0, 0.7)) / (2 * h)

        np.testing.assert_allclose(first_piola(F, 2.0, 0.7), numeric, rtol = 1e-6, atol = 1e-8)


def test_tangent_matches_stress_derivative(rng):
    h = 1e-6

    for F in _random_gradients(rng, 5, spread = 0.2):
        numeric = np.zeros((2, 2, 2, 2))

        for k in range(2):
            for l in range(2):
                bump             = np.zeros((2, 2))
                bump[k, l]       = h
                numeric[:, :, k, l] = (first_piola(F + bump, 2.0, 0.7) - first_piola(F - bump, 2.0, 0.7)) / (2 * h)

        np.testing.assert_allclose(tangent(F, 2.0, 0.7), numeric, rtol = 1e-6, atol = 1e-8)


# -------------------------
# ASSEMBLY
# -------------------------

def test_assembled_jacobian_matches_residual_differences(rng, small_bitmap):
    mesh                    = build_mesh(to_property_field(small_bitmap), 1)
    u                       = 0.01 * rng.standard_normal(mesh.num_dofs)
    _, jacobian, _          = assemble(mesh, u)
    dense                   = jacobian.toarray()
    h                       = 1e-6

    for dof in rng.choice(mesh.num_dofs, size = 12, replace = False):
        bump                = np.zeros(mesh.num_dofs)
        bump[dof]           = h
        plus, _, _          = assemble(mesh, u + bump, with_jacobian = False)
        minus, _, _         = assemble(mesh, u - bump, with_jacobian = False)
        column              = (plus - minus) / (2 * h)

        assert np.linalg.norm(column - dense[:, dof]) <= 1e-5 * np.linalg.norm(dense[:, dof])


def test_residual_is_energy_gradient(rng, small_bitmap):
    mesh                    = build_mesh(to_property_field(small_bitmap), 1)
    u                       = 0.01 * rng.standard_normal(mesh.num_dofs)
    residual, _, energy     = assemble(mesh, u, with_jacobian = False)
    h                       = 1e-6

    assert energy == pytest.approx(total_energy(mesh, u), rel = 1e-14)

    for dof in rng.choice(mesh.num_dofs, size = 8, replace = False):
        bump                = np.zeros(mesh.num_dofs)
        bump[dof]           = h
        numeric             = (total_energy(mesh, u + bump) - total_energy(mesh, u - bump)) / (2 * h)

        assert numeric == pytest.approx(residual[dof], rel = 1e-5, abs = 1e-7)


def test_jacobian_is_symmetric(rng, small_bitmap):
    mesh           = build_mesh(to_property_field(small_bitmap), 1)
    _, jacobian, _ = assemble(mesh, 0.01 * rng.standard_normal(mesh.num_dofs))

    assert abs(jacobian - jacobian.T).max() < 1e-10


# -------------------------
# NEWTON SOLVES
# -------------------------

def test_unloaded_step_is_trivial(small_bitmap):
    mesh  = build_mesh(to_property_field(small_bitmap), 1)
    state = solve_step(mesh, DeformationState.zero(mesh), 0.0)

    assert state.converged
    assert state.newton_iters <= 1
    assert np.all(state.displacement == 0.0)
    assert state.energy == 0.0


def test_affine_boundary_reproduces_homogeneous_energy():
    field       = _uniform_field(128)
    mesh        = build_mesh(field, 1)
    H           = np.array([[0.10, 0.05], [0.00, -0.08]])
    state       = solve_step(mesh, DeformationState.zero(mesh), 1.0, loading = AffineBoundary(H))
    expected    = mesh.area * psi_density(np.eye(2) + H, field.lame_lambda[0, 0], field.lame_mu[0, 0])

    assert state.energy == pytest.approx(expected, rel = 1e-8)


def test_energy_scales_linearly_with_moduli():
    soft_mesh   = build_mesh(_uniform_field(0), 1)
    stiff_mesh  = build_mesh(_uniform_field(255), 1)

    soft        = solve_step(soft_mesh, DeformationState.zero(soft_mesh), 0.3)
    stiff       = solve_step(stiff_mesh, DeformationState.zero(stiff_mesh), 0.3)

    assert stiff.energy / soft.energy == pytest.approx(100.0, rel = 1e-10)


def test_converged_state_has_positive_volume(small_bitmap):
    mesh  = build_mesh(to_property_field(small_bitmap), 1)
    state = solve_step(mesh, DeformationState.zero(mesh), 1.0)

    # A SECOND ASSEMBLY RAISES IF ANY det F <= 0
    residual, _, _ = assemble(mesh, state.displacement, with_jacobian = False)

    assert state.converged
    assert np.all(np.isfinite(residual))


def test_solve_step_rejects_unloading(small_bitmap):
    mesh  = build_mesh(to_property_field(small_bitmap), 1)
    prior = DeformationState(np.zeros(mesh.num_dofs), applied = 1.0)

    with pytest.raises(ValueError):
        solve_step(mesh, prior, 0.5)


# -------------------------
# CURVES
# -------------------------

def test_uniaxial_curve_starts_at_zero_and_increases(small_bitmap):
    schedule = LoadSchedule(np.linspace(0.0, 2.0, 5))
    curve    = run_uniaxial_extension(to_property_field(small_bitmap), schedule, subdivision = 1)

    assert len(curve) == 5
    assert curve.energies[0] == 0.0
    assert np.all(np.diff(curve.energies) > 0.0)
    assert not curve.normalized


def test_uniaxial_curve_moduli_ratio():
    schedule = LoadSchedule(np.linspace(0.0, 1.0, 3))
    soft     = run_uniaxial_extension(_uniform_field(0), schedule, subdivision = 1)
    stiff    = run_uniaxial_extension(_uniform_field(255), schedule, subdivision = 1)

    assert stiff.energies[-1] / soft.energies[-1] == pytest.approx(100.0, rel = 1e-8)


def test_uniaxial_curve_normalization(small_bitmap):
    schedule = LoadSchedule(np.linspace(0.0, 1.0, 3))
    raw      = run_uniaxial_extension(to_property_field(small_bitmap), schedule, subdivision = 1)
    scaled   = run_uniaxial_extension(to_property_field(small_bitmap), schedule, subdivision = 1, normalization = raw.energies[-1])

    assert scaled.normalized
    assert scaled.energies[-1] == pytest.approx(1.0, rel = 1e-12)


def test_uniaxial_curve_is_bitwise_deterministic(small_bitmap):
    schedule = LoadSchedule(np.linspace(0.0, 1.0, 3))
    first    = run_uniaxial_extension(to_property_field(small_bitmap), schedule, subdivision = 1)
    second   = run_uniaxial_extension(to_property_field(small_bitmap), schedule, subdivision = 1)

    np.testing.assert_array_equal(first.energies, second.energies)


def test_non_convergence_reports_failing_step(small_bitmap):
    schedule = LoadSchedule(np.linspace(0.0, 1.0, 3))
    settings = NewtonSettings(tol = 0.0, atol = 0.0, max_iter = 1, bisection_depth = 1)

    with pytest.raises(NonConvergenceError) as info:
        run_uniaxial_extension(to_property_field(small_bitmap), schedule, subdivision = 1, settings = settings)

    assert info.value.step == 1
    assert np.isfinite(info.value.residual_norm)


def test_displacement_dump(tmp_path, small_bitmap):
    schedule = LoadSchedule(np.linspace(0.0, 1.0, 3))
    run_uniaxial_extension(to_property_field(small_bitmap), schedule, subdivision = 1, dump_dir = tmp_path)

    step, grid = read_displacement(tmp_path / "displacement_step02.bin")

    assert step == 2
    assert grid.shape == (9, 9, 2)
    np.testing.assert_allclose(grid[-1, :, 1], 1.0)
    np.testing.assert_allclose(grid[0], 0.0)


def test_dump_header_layout(tmp_path, small_bitmap):
    mesh  = build_mesh(to_property_field(small_bitmap), 1)
    path  = dump_displacement(tmp_path / "zero.bin", mesh, DeformationState.zero(mesh), 0)

    assert path.stat().st_size == 16 + mesh.num_dofs * 8


def test_solve_many_preserves_order(digit_stack):
    fields   = [to_property_field(Bitmap(image[10:14, 10:14])) for image in digit_stack[:2]]
    fields.append(_uniform_field(255, size = 4))
    schedule = LoadSchedule(np.linspace(0.0, 1.0, 3))

    serial   = solve_many(fields, schedule, subdivision = 1, jobs = 1)
    parallel = solve_many(fields, schedule, subdivision = 1, jobs = 2)

    for one, other, field in zip(serial, parallel, fields):
        np.testing.assert_array_equal(one.energies, other.energies)
        np.testing.assert_array_equal(one.energies, run_uniaxial_extension(field, schedule, subdivision = 1).energies)


def test_solve_many_writes_one_dump_directory_per_sample(tmp_path, small_bitmap):
    fields   = [to_property_field(small_bitmap)] * 2
    schedule = LoadSchedule(np.linspace(0.0, 1.0, 3))

    solve_many(fields, schedule, subdivision = 1, dump_dirs = [tmp_path / "a", tmp_path / "b"])

    assert read_displacement(tmp_path / "b" / "displacement_step02.bin")[0] == 2

    with pytest.raises(ContractError):
        solve_many(fields, schedule, subdivision = 1, dump_dirs = [tmp_path / "a"])

def test_energy_settles_under_refinement(small_bitmap):
    schedule = LoadSchedule(np.linspace(0.0, 1.0, 3))
    field    = to_property_field(small_bitmap)
    coarse, medium, fine = (run_uniaxial_extension(field, schedule, subdivision = s).energies[-1] for s in (1, 2, 4))

    assert abs(fine - medium) < abs(medium - coarse)
    assert abs(fine - medium) < 0.01 * fine


@pytest.mark.slow
def test_mesh_convergence_on_digits(digit_stack):
    yy, xx = np.mgrid[0:28, 0:28]
    cross  = np.where((np.abs(yy - 13.5) < 3) | (np.abs(xx - 13.5) < 3), 255, 0).astype(np.uint8)

    for image in [*digit_stack, cross]:
        field  = to_property_field(Bitmap(image))
        coarse = run_uniaxial_extension(field, subdivision = 2)
        fine   = run_uniaxial_extension(field, subdivision = 4)

        assert abs(fine.energies[-1] - coarse.energies[-1]) < 0.01 * fine.energies[-1]
