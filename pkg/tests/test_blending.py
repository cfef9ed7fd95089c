# tests/test_blending.py

import numpy as np
import pytest

from app.blending import (
    BlendField,
    Region,
    Regions,
    compute_beta,
    gradient_jumps,
    hessian_objective,
    quintic,
    radial_profile,
)
from app.lattice import DefectKind, DefectSpec, LatticeSpec, build_lattice


@pytest.fixture(scope="module")
def model():
    return build_lattice(LatticeSpec(10.0, defect=DefectSpec(DefectKind.microcrack, 2)))


def test_quintic_end_values():
    assert quintic(0.0) == 0.0
    assert quintic(1.0) == 1.0
    assert np.isclose(quintic(0.5), 0.5)
    assert quintic(-2.0) == 0.0
    assert quintic(3.0) == 1.0


def test_regions_labels(model):
    regions = Regions.for_model(model, 2.0, 3.0)
    labels = regions.labels
    assert (regions.distance[labels == Region.atomistic] <= 2.0 + 1e-9).all()
    assert (regions.distance[labels == Region.continuum] >= 5.0 - 1e-9).all()
    blending = labels == Region.blending
    assert blending.any()
    assert ((regions.distance[blending] > 2.0) & (regions.distance[blending] < 5.0)).all()


def test_negative_radii_rejected(model):
    with pytest.raises(ValueError):
        Regions.for_model(model, -1.0, 2.0)


def test_expanded_regions(model):
    regions = Regions.for_model(model, 2.0, 3.0)
    grown = regions.expanded(2, 1)
    assert grown.atomistic_radius == 4.0
    assert grown.outer_radius == 6.0
    clamped = regions.expanded(4, 0)
    assert clamped.atomistic_radius == 6.0
    assert clamped.blending_width == 0.0


def test_gradient_jumps_vanish_for_affine_field(model):
    J, w = gradient_jumps(model.positions, model.triangles)
    values = 0.3 * model.positions[:, 0] - 0.7 * model.positions[:, 1] + 2.0
    assert np.allclose(J @ values, 0.0, atol=1e-10)
    assert (w > 0).all()
    assert hessian_objective(model, values) < 1e-18


def test_compute_beta_respects_regions(model):
    regions = Regions.for_model(model, 2.0, 3.0)
    blend = compute_beta(regions, model)
    beta = blend.site_values
    labels = regions.labels
    inside = model.in_domain
    assert np.all(beta[(labels == Region.atomistic) & inside] == 0.0)
    assert np.all(beta[(labels == Region.continuum) & inside] == 1.0)
    assert beta.min() >= 0.0
    assert beta.max() <= 1.0
    assert not blend.fallback


def test_optimised_beta_beats_radial_profile(model):
    regions = Regions.for_model(model, 2.0, 3.0)
    blend = compute_beta(regions, model)
    assert blend.objective <= hessian_objective(model, radial_profile(regions)) * (1 + 1e-8)


def test_narrow_blending_uses_quintic(model):
    regions = Regions.for_model(model, 2.0, 1.0)
    blend = compute_beta(regions, model)
    assert blend.fallback
    assert np.allclose(blend.site_values, radial_profile(regions))


def test_zero_width_is_a_step(model):
    regions = Regions.for_model(model, 3.0, 0.0)
    beta = compute_beta(regions, model).site_values
    assert set(np.unique(beta)) <= {0.0, 1.0}
    assert np.all(beta[regions.distance <= 3.0] == 0.0)


def test_node_values_use_far_value(model):
    blend = BlendField.constant(model, 0.0)
    values = blend.node_values(np.array([0, -1, 3]))
    assert np.allclose(values, [0.0, 0.0, 0.0])
    field = BlendField(np.zeros(model.n_sites))
    assert np.allclose(field.node_values(np.array([-1, 2])), [1.0, 0.0])
