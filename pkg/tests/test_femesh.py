# tests/test_femesh.py

import numpy as np
import pytest

from app.blending import Region
from app.femesh import (
    MIN_ANGLE_FLOOR,
    RULES,
    DomainTooSmallError,
    MeshError,
    bisect,
    build_initial_mesh,
    expand_regions,
    full_atomistic_mesh,
    interpolate_to_lattice,
    quadrature_apply,
    ring_cloud,
    transfer,
    write_mesh,
)
from app.lattice import DefectKind, DefectSpec, LatticeSpec, build_lattice
from app.utils import min_angles


@pytest.fixture(scope="module")
def model():
    return build_lattice(LatticeSpec(12.0, defect=DefectSpec(DefectKind.microcrack, 2)))


@pytest.fixture(scope="module")
def mesh(model):
    return build_initial_mesh(model, 2.0, 2.0, coarsening=1.0)


def test_ring_cloud_grades_spacing():
    rings = ring_cloud(5.0, 30.0, 1.5)
    spacings = [h for _, h, _ in rings[:-1]]
    assert np.allclose(np.diff(spacings) / np.array(spacings[:-1]), 0.5)
    assert rings[-1][0] == 30.0
    assert np.allclose(np.linalg.norm(rings[-1][2], axis=1), 30.0)


def test_initial_mesh_has_all_regions(mesh):
    regions = set(np.unique(mesh.element_region).tolist())
    assert regions == {int(Region.atomistic), int(Region.blending), int(Region.continuum)}
    assert (mesh.areas > 0).all()
    assert np.isclose(np.linalg.norm(mesh.nodes, axis=1).max(), 12.0)


def test_atomistic_elements_have_lattice_vertices(mesh):
    lattice_like = mesh.element_region != Region.continuum
    assert (mesh.node_site[mesh.elements[lattice_like]] >= 0).all()
    assert (mesh.node_beta[mesh.elements[mesh.element_region == Region.atomistic]] == 0).all()


def test_p1_dofs_are_free_vertices(mesh):
    assert mesh.n_dof == int((~mesh.boundary_nodes).sum())
    assert mesh.dofs.positions.shape == (mesh.n_dof, 2)


def test_quadrature_weights_cover_the_mesh(model, mesh):
    assert np.isclose(mesh.quadrature.weights.sum(), mesh.areas.sum())
    p2 = build_initial_mesh(model, 2.0, 2.0, coarsening=1.0, fe_order=2)
    assert np.isclose(p2.quadrature.weights.sum(), p2.areas.sum())
    e = int(np.argmax(p2.element_order))
    assert np.isclose(quadrature_apply(p2, e, lambda x: np.ones(len(x))), p2.areas[e])


def test_p2_rule_is_exact_for_quadratics():
    rng = np.random.default_rng(5)
    rule = RULES[2]
    for _ in range(20):
        corners = rng.uniform(-1.0, 1.0, (3, 2))
        (ux, uy), (vx, vy) = corners[1] - corners[0], corners[2] - corners[0]
        area = 0.5 * abs(ux * vy - uy * vx)
        if area < 1e-3:
            continue
        points = rule.points @ corners
        x, y = corners[:, 0], corners[:, 1]
        for f, p, q in [
            (lambda z: z[:, 0] ** 2, x, x),
            (lambda z: z[:, 0] * z[:, 1], x, y),
            (lambda z: z[:, 1] ** 2, y, y),
        ]:
            exact = area / 12.0 * (p.sum() * q.sum() + np.dot(p, q))
            assert area * np.dot(rule.weights, f(points)) == pytest.approx(exact, abs=1e-12)
        assert area * np.dot(rule.weights, points[:, 0]) == pytest.approx(area * x.mean(), abs=1e-12)
        assert area * np.dot(rule.weights, points[:, 1]) == pytest.approx(area * y.mean(), abs=1e-12)
        assert area * rule.weights.sum() == pytest.approx(area, abs=1e-12)


def test_p2_rule_on_the_reference_triangle():
    rule = RULES[2]
    points = rule.points @ np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert 0.5 * np.dot(rule.weights, points[:, 0] ** 2) == pytest.approx(1.0 / 12.0, abs=1e-14)


def test_random_bisection_keeps_the_angle_floor(model):
    graded = build_initial_mesh(model, 2.0, 2.0)
    initial = {tuple(sorted(t)) for t in graded.elements.tolist()}
    rng = np.random.default_rng(11)
    refined = graded
    for _ in range(100):
        continuum = np.flatnonzero(refined.element_region == Region.continuum)
        refined = bisect(refined, rng.choice(continuum, size=min(3, len(continuum)), replace=False))
        new = np.array([tuple(sorted(t)) not in initial for t in refined.elements.tolist()])
        if new.any():
            assert min_angles(refined.nodes, refined.elements[new]).min() >= MIN_ANGLE_FLOOR
    assert refined.n_elements > graded.n_elements


def test_p2_adds_midpoint_dofs(model, mesh):
    p2 = build_initial_mesh(model, 2.0, 2.0, coarsening=1.0, fe_order=2)
    assert p2.n_dof > mesh.n_dof
    assert (p2.element_order[p2.element_region != Region.continuum] == 1).all()
    assert (p2.element_order == 2).any()


@pytest.mark.parametrize("fe_order", [1, 2])
def test_evaluation_at_dofs_reproduces_coefficients(model, fe_order):
    mesh = build_initial_mesh(model, 2.0, 2.0, coarsening=1.0, fe_order=fe_order)
    rng = np.random.default_rng(0)
    U = rng.standard_normal((mesh.n_dof, 2))
    assert np.allclose(mesh.evaluate(U, mesh.dofs.positions), U)


def test_interpolation_reproduces_affine_fields_inside(mesh):
    G = np.array([[0.1, -0.2], [0.05, 0.3]])
    U = mesh.dofs.positions @ G.T
    u = interpolate_to_lattice(mesh, U)
    model = mesh.model
    inside = np.flatnonzero(model.radii < 6.0)
    assert np.allclose(u[inside], model.positions[inside] @ G.T)
    assert np.allclose(u[~model.in_domain], 0.0)


def test_full_atomistic_mesh(model):
    mesh = full_atomistic_mesh(model)
    assert (mesh.element_region == Region.atomistic).all()
    assert (mesh.node_beta == 0).all()
    assert mesh.n_elements == len(model.triangles)
    assert mesh.n_dof == int(model.in_domain.sum()) - len(model.boundary_sites)


def test_bisect_refines_outer_continuum(mesh):
    outer = np.flatnonzero(
        (mesh.element_region == Region.continuum) & (np.linalg.norm(mesh.centroids, axis=1) > 10.0)
    )
    refined = bisect(mesh, outer)
    assert refined.n_elements > mesh.n_elements
    assert refined.n_dof > mesh.n_dof
    assert np.isclose(refined.areas.sum(), mesh.areas.sum())
    assert (refined.areas > 0).all()
    assert refined.fingerprint != mesh.fingerprint


def test_bisect_nothing_marked(mesh):
    assert bisect(mesh, []) is mesh


def test_bisect_rejects_atomistic_elements(mesh):
    atomistic = np.flatnonzero(mesh.element_region == Region.atomistic)
    with pytest.raises(MeshError):
        bisect(mesh, atomistic[:1])


def test_transfer_keeps_affine_fields(mesh):
    outer = np.flatnonzero(
        (mesh.element_region == Region.continuum) & (np.linalg.norm(mesh.centroids, axis=1) > 10.0)
    )
    refined = bisect(mesh, outer)
    G = np.array([[0.02, 0.0], [0.01, -0.03]])
    U = mesh.dofs.positions @ G.T
    V = transfer(mesh, U, refined)
    radii = np.linalg.norm(refined.dofs.positions, axis=1)
    inner = radii < 9.0
    assert np.allclose(V[inner], refined.dofs.positions[inner] @ G.T)


def test_expand_regions(model, mesh):
    grown = expand_regions(mesh, model, 1, 1)
    assert grown.regions.atomistic_radius == 3.0
    assert grown.regions.outer_radius == 5.0
    atomistic = lambda m: int((m.element_region == Region.atomistic).sum())
    assert atomistic(grown) > atomistic(mesh)
    assert expand_regions(mesh, model, 0, 0) is mesh


def test_expand_regions_beyond_domain(model, mesh):
    with pytest.raises(DomainTooSmallError):
        expand_regions(mesh, model, 8, 2)


def test_invalid_initial_mesh(model):
    with pytest.raises(MeshError):
        build_initial_mesh(model, 8.0, 4.0)
    with pytest.raises(MeshError):
        build_initial_mesh(model, 2.0, 2.0, fe_order=3)


def test_write_mesh(tmp_path, mesh):
    path = tmp_path / "mesh.txt"
    write_mesh(mesh, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# nodes")
    assert len(lines) == 2 + mesh.n_vertices + mesh.n_elements
    assert any(line.endswith("atomistic 0") for line in lines)
