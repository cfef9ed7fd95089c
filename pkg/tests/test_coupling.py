# tests/test_coupling.py

import numpy as np
import pytest

from app.coupling import (
    BlendedProblem,
    Displacement,
    FarField,
    GhostForceCorrection,
    MethodSpec,
    Scheme,
    SolverError,
    SolverTrace,
    StaleCorrectionError,
    bgfc_gradient,
    minimize_ncg,
    solve,
)
from app.femesh import build_initial_mesh, full_atomistic_mesh
from app.lattice import DefectKind, DefectSpec, LatticeSpec, build_lattice

far_field = FarField()


@pytest.fixture(scope="module")
def perfect():
    return build_lattice(LatticeSpec(10.0, defect=DefectSpec(DefectKind.none)))


@pytest.fixture(scope="module")
def perfect_mesh(perfect):
    return build_initial_mesh(perfect, 2.0, 2.0, coarsening=1.0)


@pytest.fixture(scope="module")
def crack_mesh():
    model = build_lattice(LatticeSpec(10.0, defect=DefectSpec(DefectKind.microcrack, 2)))
    return build_initial_mesh(model, 2.0, 2.0, coarsening=1.0)


def test_method_names():
    assert MethodSpec.from_name("BQCE") == MethodSpec(Scheme.bqce, 1)
    assert MethodSpec.from_name("bgfc2") == MethodSpec(Scheme.bgfc, 2)
    assert MethodSpec("bqcf", 2).name == "bqcf2"
    assert Scheme("BGFC") is Scheme.bgfc


def test_invalid_methods():
    with pytest.raises(ValueError):
        MethodSpec(Scheme.bqce, 2)
    with pytest.raises(ValueError):
        MethodSpec.from_name("qnl")
    with pytest.raises(ValueError):
        MethodSpec(Scheme.bgfc, 3)


def test_predictor_uses_equilibrium_stretch():
    t = far_field.t_star
    assert np.allclose(far_field.predictor + np.eye(2), t * np.array([[1.0, 0.03], [0.0, 1.03]]))


def test_displacement_shape_checked(perfect_mesh):
    with pytest.raises(ValueError):
        Displacement(np.zeros((3, 2)), perfect_mesh, far_field.predictor)
    bad = np.zeros((perfect_mesh.n_dof, 2))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        Displacement(bad, perfect_mesh, far_field.predictor)


def test_energies_vanish_at_predictor(perfect_mesh):
    problem = BlendedProblem(perfect_mesh, far_field)
    zero = np.zeros((perfect_mesh.n_dof, 2))
    assert abs(problem.bqce_energy(zero)) < 1e-12
    assert abs(problem.bgfc_energy_renormalized(zero)) < 1e-12


def test_pure_atomistic_forces_vanish_in_the_interior(perfect):
    mesh = full_atomistic_mesh(perfect)
    problem = BlendedProblem(mesh, far_field)
    gradient = problem.bqce_gradient(np.zeros((mesh.n_dof, 2)))
    interior = np.linalg.norm(mesh.dofs.positions, axis=1) < perfect.domain_radius - 2.5
    assert np.abs(gradient[interior]).max() < 1e-10
    assert np.abs(gradient[~interior]).max() > 1e-6


def test_bqce_has_ghost_forces(perfect_mesh):
    problem = BlendedProblem(perfect_mesh, far_field)
    gradient = problem.bqce_gradient(np.zeros((perfect_mesh.n_dof, 2)))
    assert np.abs(gradient).max() > 1e-8


def test_bgfc_removes_ghost_forces(perfect_mesh):
    problem = BlendedProblem(perfect_mesh, far_field)
    correction = GhostForceCorrection.compute(perfect_mesh, far_field)
    zero = np.zeros((perfect_mesh.n_dof, 2))
    assert np.abs(bgfc_gradient(problem, correction, zero)).max() < 1e-10


def test_bqcf_is_consistent_on_the_perfect_lattice(perfect_mesh):
    problem = BlendedProblem(perfect_mesh, far_field)
    residual = problem.bqcf_residual(np.zeros((perfect_mesh.n_dof, 2)))
    assert residual.shape == (perfect_mesh.n_dof, 2)
    assert np.abs(residual).max() < 1e-10


def test_bqce_gradient_matches_finite_differences(crack_mesh):
    problem = BlendedProblem(crack_mesh, far_field)
    rng = np.random.default_rng(3)
    U = 0.01 * rng.standard_normal((crack_mesh.n_dof, 2))
    V = rng.standard_normal((crack_mesh.n_dof, 2))
    h = 1e-5
    fd = (problem.bqce_energy(U + h * V) - problem.bqce_energy(U - h * V)) / (2 * h)
    assert np.isclose(np.sum(problem.bqce_gradient(U) * V), fd, rtol=1e-4, atol=1e-6)


def test_stale_correction(perfect_mesh, crack_mesh):
    correction = GhostForceCorrection.compute(perfect_mesh, far_field)
    with pytest.raises(StaleCorrectionError):
        correction.check(crack_mesh)


def test_minimize_ncg_on_quadratic():
    A = np.diag([1.0, 10.0, 100.0])
    b = np.array([1.0, -2.0, 3.0])
    energy = lambda x: 0.5 * x @ A @ x - b @ x
    gradient = lambda x: A @ x - b
    trace = SolverTrace()
    x, iterations, residual, value = minimize_ncg(energy, gradient, lambda g: g, np.zeros(3), 1e-9, 200, trace)
    assert np.allclose(x, np.linalg.solve(A, b))
    assert residual <= 1e-9
    assert len(trace.rows) == iterations + 1


def test_minimize_ncg_iteration_cap():
    A = np.diag(np.logspace(0, 4, 30))
    energy = lambda x: 0.5 * x @ A @ x - x.sum()
    gradient = lambda x: A @ x - 1.0
    with pytest.raises(SolverError):
        minimize_ncg(energy, gradient, lambda g: g, np.zeros(30), 1e-14, 2)


def test_solve_perfect_lattice_needs_no_iterations(perfect_mesh):
    solution = solve(MethodSpec(Scheme.bgfc, 1), perfect_mesh, far_field)
    assert solution.iterations == 0
    assert np.allclose(solution.values, 0.0)


@pytest.mark.parametrize("name", ["bqce", "bgfc1", "bqcf1"])
def test_solve_microcrack(crack_mesh, name, tmp_path):
    trace = SolverTrace(tmp_path / "trace.csv")
    solution = solve(MethodSpec.from_name(name), crack_mesh, far_field, g_tol=1e-6, trace=trace)
    assert solution.residual <= 1e-6
    assert solution.iterations > 0
    assert np.abs(solution.values).max() > 1e-4
    assert (tmp_path / "trace.csv").read_text().startswith("iteration,energy,residual")
    if name != "bqcf1":
        assert solution.energy < 0


def test_solve_warm_start_and_order_checks(crack_mesh):
    method = MethodSpec.from_name("bqce")
    first = solve(method, crack_mesh, far_field, g_tol=1e-6)
    again = solve(method, crack_mesh, far_field, warm_start=first, g_tol=1e-6)
    assert again.iterations <= 1
    with pytest.raises(ValueError):
        solve(MethodSpec.from_name("bgfc2"), crack_mesh, far_field)


def test_solver_trace_writes_csv(tmp_path):
    trace = SolverTrace(tmp_path / "trace.csv")
    trace.record(0, 1.5, 0.1)
    trace.record(1, 1.25, 0.01)
    trace.write()
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,energy,residual"
    assert len(lines) == 3
