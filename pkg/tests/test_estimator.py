# tests/test_estimator.py

import numpy as np
import pytest

from app.blending import Region
from app.coupling import FarField, Scheme
from app.estimator import (
    ResidualForces,
    energy_estimator,
    estimate,
    eta,
    overlap_matrix,
    p1_matrices,
    poisson_p1,
    rescaled_interpolant,
    residual_dual_norm,
    residual_forces,
    solve_phi,
    write_estimate,
)
from app.femesh import build_initial_mesh, full_atomistic_mesh
from app.lattice import DefectKind, DefectSpec, LatticeSpec, StencilError, build_lattice

far_field = FarField()


@pytest.fixture(scope="module")
def perfect():
    return build_lattice(LatticeSpec(8.0, defect=DefectSpec(DefectKind.none)))


@pytest.fixture(scope="module")
def crack_mesh():
    model = build_lattice(LatticeSpec(10.0, defect=DefectSpec(DefectKind.microcrack, 2)))
    return build_initial_mesh(model, 2.0, 2.0, coarsening=1.0)


@pytest.fixture(scope="module")
def perturbed(crack_mesh):
    rng = np.random.default_rng(7)
    return 1e-3 * rng.standard_normal((crack_mesh.n_dof, 2))


def test_p1_matrices(perfect):
    K, M = p1_matrices(perfect.positions, perfect.triangles, perfect.n_sites)
    assert np.allclose(K.sum(axis=1), 0.0)
    assert np.isclose(M.sum(), np.abs(perfect.triangle_areas).sum())
    assert abs(K - K.T).max() < 1e-12


def test_poisson_with_zero_load(perfect):
    load = np.zeros((perfect.n_sites, 2))
    phi = poisson_p1(perfect.positions, perfect.triangles, load, perfect.boundary_sites)
    assert np.all(phi == 0.0)


def test_residual_forces_vanish_on_the_perfect_lattice(perfect):
    forces = residual_forces(perfect, np.zeros((perfect.n_sites, 2)), far_field)
    assert np.abs(forces.values).max() < 1e-10
    assert np.allclose(forces.total, 0.0)


def test_residual_forces_input_checks(perfect):
    with pytest.raises(StencilError):
        residual_forces(perfect, np.zeros((5, 2)), far_field)
    u = np.zeros((perfect.n_sites, 2))
    u[-1] = np.inf
    with pytest.raises(StencilError):
        residual_forces(perfect, u, far_field)


def test_rescaling_uses_hat_function_mass(perfect):
    values = np.zeros((perfect.n_sites, 2))
    origin = perfect.index_lookup[(0, 0)]
    values[origin] = [1.0, 0.0]
    interpolant = rescaled_interpolant(perfect, ResidualForces(perfect, values))
    assert np.isclose(interpolant.scale[origin], 2.0 / np.sqrt(3.0))
    assert np.allclose(interpolant.values[origin], [2.0 / np.sqrt(3.0), 0.0])
    assert (interpolant.scale[~perfect.in_domain] == 0).all()


def test_eta_is_comparable_to_the_dual_norm(perfect):
    rng = np.random.default_rng(11)
    values = np.zeros((perfect.n_sites, 2))
    inside = perfect.in_domain
    values[inside] = rng.standard_normal((int(inside.sum()), 2))
    forces = ResidualForces(perfect, values)
    value = eta(perfect, solve_phi(perfect, rescaled_interpolant(perfect, forces)))
    dual = residual_dual_norm(perfect, forces)
    assert dual > 0
    assert 0.1 < value / dual < 2.0


def test_estimate_on_the_perfect_lattice(perfect):
    mesh = full_atomistic_mesh(perfect)
    report = estimate(mesh, far_field, np.zeros((mesh.n_dof, 2)), Scheme.bqce)
    assert report.eta < 1e-8
    assert report.mu_E == 0.0
    assert report.has_energy


def test_overlap_rows_sum_to_one(crack_mesh):
    model = crack_mesh.model
    overlap = overlap_matrix(crack_mesh, model.positions, model.triangles)
    assert overlap.shape == (len(model.triangles), crack_mesh.n_elements)
    assert np.allclose(np.asarray(overlap.sum(axis=1)).ravel(), 1.0)
    assert overlap.min() >= 0.0


def test_local_indicators_add_up(crack_mesh, perturbed):
    report = estimate(crack_mesh, far_field, perturbed, Scheme.bqce)
    assert report.eta > 0
    assert report.rho_tr >= 0
    assert report.eta_local.shape == (crack_mesh.n_elements,)
    assert (report.eta_local >= 0).all()
    assert np.isclose(report.eta_local.sum(), report.eta)
    assert np.isclose(report.mu_E_local.sum(), report.mu_E)
    assert np.isclose(report.eta_E, report.eta**2 + abs(report.mu_E))
    assert np.allclose(report.eta_E_local, report.eta_local * report.eta + np.abs(report.mu_E_local))


def test_energy_estimator_is_zero_without_blending(perfect):
    mesh = full_atomistic_mesh(perfect)
    rng = np.random.default_rng(2)
    U = 1e-3 * rng.standard_normal((mesh.n_dof, 2))
    mu, local = energy_estimator(mesh, far_field, U, Scheme.bgfc)
    assert mu == 0.0
    assert not local.any()


def test_energy_estimator_skips_atomistic_elements(crack_mesh, perturbed):
    _, local = energy_estimator(crack_mesh, far_field, perturbed, Scheme.bqce)
    assert local.any()
    assert not local[crack_mesh.element_region == Region.atomistic].any()


@pytest.fixture(scope="module")
def graded_mesh():
    model = build_lattice(LatticeSpec(20.0, defect=DefectSpec(DefectKind.none)))
    return build_initial_mesh(model, 2.0, 2.0)


@pytest.mark.parametrize("scheme", [Scheme.bqce, Scheme.bgfc])
def test_energy_estimator_vanishes_under_affine_strain(graded_mesh, scheme):
    U = 1e-3 * graded_mesh.dofs.positions
    _, local = energy_estimator(graded_mesh, far_field, U, scheme)
    radius = np.linalg.norm(graded_mesh.nodes[graded_mesh.elements], axis=2).max(axis=1)
    interior = radius < 10.0
    assert (interior & (graded_mesh.element_region == Region.continuum)).any()
    assert (interior & (graded_mesh.element_region == Region.blending)).any()
    assert np.abs(local[interior]).max() < 1e-10


def test_energy_indicator_bounds_eta_E(crack_mesh, perturbed):
    report = estimate(crack_mesh, far_field, perturbed, Scheme.bqce)
    assert report.eta_E_local.sum() >= report.eta_E - 1e-14


def test_bqcf_has_no_energy_estimator(crack_mesh, perturbed):
    with pytest.raises(ValueError):
        energy_estimator(crack_mesh, far_field, perturbed, Scheme.bqcf)
    report = estimate(crack_mesh, far_field, perturbed, Scheme.bqcf)
    assert not report.has_energy
    assert np.isnan(report.eta_E)


def test_write_estimate(tmp_path, crack_mesh, perturbed):
    report = estimate(crack_mesh, far_field, perturbed, Scheme.bqcf)
    path = tmp_path / "step_000.csv"
    write_estimate(report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "element,eta_T,mu_E_T,eta_E_T"
    assert len(lines) == crack_mesh.n_elements + 1
    assert lines[1].endswith("nan,nan")
