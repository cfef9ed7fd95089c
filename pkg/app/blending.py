import logging
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree

from .lattice import LatticeModel
from .utils import p1_gradients

logger = logging.getLogger(__name__)

LAYER = 1.0  # one lattice layer, in nearest-neighbour spacings
REGION_TOL = 1e-9
MIN_SOLVE_WIDTH = 2.0  # narrower annuli use the radial quintic
CG_RTOL = 1e-10


class BlendingError(RuntimeError):
    """Raised when the blending function cannot be computed."""


class Region(IntEnum):
    atomistic = 0
    blending = 1
    continuum = 2


@dataclass(frozen=True, eq=False)
class Regions:
    """
    Radial decomposition around the defect core: atomistic for d <= R_a, blending for
    R_a < d < R_a + L_b, continuum beyond. d is the distance of a site to the core points.
    """

    atomistic_radius: float
    blending_width: float
    distance: np.ndarray

    @classmethod
    def for_model(cls, model: LatticeModel, atomistic_radius: float, blending_width: float) -> "Regions":
        if atomistic_radius < 0 or blending_width < 0:
            raise ValueError(
                f"Region radii must be nonnegative, got R_a={atomistic_radius}, L_b={blending_width}."
            )
        distance, _ = cKDTree(model.core_points).query(model.positions)
        return cls(float(atomistic_radius), float(blending_width), distance)

    @property
    def outer_radius(self) -> float:
        return self.atomistic_radius + self.blending_width

    @cached_property
    def labels(self) -> np.ndarray:
        labels = np.full(len(self.distance), Region.blending, dtype=np.int8)
        labels[self.distance >= self.outer_radius - REGION_TOL] = Region.continuum
        labels[self.distance <= self.atomistic_radius + REGION_TOL] = Region.atomistic
        return labels

    def sites(self, region: Region) -> np.ndarray:
        return np.flatnonzero(self.labels == region)

    def expanded(self, atomistic_layers: int, blending_layers: int) -> "Regions":
        """
        Moves the atomistic radius out by atomistic_layers and the outer blending radius
        by blending_layers; the outer radius never falls below the new atomistic radius.
        """
        r_a = self.atomistic_radius + atomistic_layers * LAYER
        outer = max(self.outer_radius + blending_layers * LAYER, r_a)
        return Regions(r_a, outer - r_a, self.distance)


@dataclass(frozen=True, eq=False)
class BlendField:
    """
    Blending values at lattice sites; nodes that are not lattice sites take far_value.
    objective is the discrete second-derivative functional of the unclipped values.
    """

    site_values: np.ndarray
    far_value: float = 1.0
    objective: float = 0.0
    fallback: bool = False

    @classmethod
    def constant(cls, model: LatticeModel, value: float) -> "BlendField":
        return cls(np.full(model.n_sites, float(value)), far_value=float(value))

    def node_values(self, node_site: np.ndarray) -> np.ndarray:
        node_site = np.asarray(node_site)
        values = np.full(len(node_site), self.far_value)
        on_site = node_site >= 0
        values[on_site] = self.site_values[node_site[on_site]]
        return values


def quintic(t):
    """s(t) = 6t^5 - 15t^4 + 10t^3 on [0, 1], constant outside."""
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t**2)


def gradient_jumps(points: np.ndarray, triangles: np.ndarray):
    """
    Normal jumps of the P1 gradient across interior edges, as a sparse operator.

    Parameters:
        points (np.ndarray): (n, 2) vertex positions.
        triangles (np.ndarray): (m, 3) counter-clockwise triangles.

    Returns:
        tuple: (J, w) with J of shape (n_interior_edges, n) and edge weights
            w = (|T1| + |T2|) / 2.
    """
    grads, areas = p1_gradients(points, triangles)
    local = triangles[:, [1, 2, 2, 0, 0, 1]].reshape(-1, 2)
    owner = np.repeat(np.arange(len(triangles)), 3)
    pairs = np.sort(local, axis=1)
    keys = pairs[:, 0] * len(points) + pairs[:, 1]
    order = np.argsort(keys, kind="stable")
    keys, owner, pairs = keys[order], owner[order], pairs[order]
    first = np.flatnonzero(keys[:-1] == keys[1:])
    t1, t2 = owner[first], owner[first + 1]
    a, b = pairs[first, 0], pairs[first, 1]

    tangent = points[b] - points[a]
    normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / np.linalg.norm(tangent, axis=1)[:, None]
    n_edges = len(first)
    rows = np.repeat(np.arange(n_edges), 6)
    c1 = np.einsum("eid,ed->ei", grads[t1], normal)
    c2 = -np.einsum("eid,ed->ei", grads[t2], normal)
    cols = np.hstack([triangles[t1], triangles[t2]]).ravel()
    vals = np.hstack([c1, c2]).ravel()
    J = sp.csr_matrix((vals, (rows, cols)), shape=(n_edges, len(points)))
    weights = 0.5 * (np.abs(areas[t1]) + np.abs(areas[t2]))
    return J, weights


def hessian_objective(model: LatticeModel, values: np.ndarray) -> float:
    J, w = gradient_jumps(model.positions, model.triangles)
    jumps = J @ values
    return float(np.sum(w * jumps**2))


def radial_profile(regions: Regions) -> np.ndarray:
    if regions.blending_width <= 0:
        return (regions.distance > regions.atomistic_radius + REGION_TOL).astype(float)
    return quintic((regions.distance - regions.atomistic_radius) / regions.blending_width)


def compute_beta(target, model: LatticeModel) -> BlendField:
    """
    Blending function on the lattice sites: 0 in the atomistic region, 1 in the continuum
    region and, in between, the minimiser of the squared gradient jumps of its P1 extension.

    Parameters:
        target (Regions | CoupledMesh): The region decomposition, or a mesh carrying one.
        model (LatticeModel): The lattice whose triangulation carries the functional.

    Returns:
        BlendField: Site values clipped to [0, 1].

    Raises:
        BlendingError: If the conjugate-gradient solve does not converge.
    """
    regions = getattr(target, "regions", target)
    labels = regions.labels
    unknown = np.flatnonzero((labels == Region.blending) & model.in_domain)

    if regions.blending_width < MIN_SOLVE_WIDTH or len(unknown) == 0:
        values = radial_profile(regions)
        if len(unknown):
            logger.warning(
                f"Blending width {regions.blending_width} below {MIN_SOLVE_WIDTH}: using the radial quintic."
            )
        return BlendField(values, objective=hessian_objective(model, values), fallback=True)

    fixed = np.where(labels == Region.continuum, 1.0, 0.0)
    J, w = gradient_jumps(model.positions, model.triangles)
    Ju = J[:, unknown]
    W = sp.diags(w)
    A = (Ju.T @ W @ Ju).tocsr()
    rhs = -(Ju.T @ (w * (J @ fixed)))
    x0 = radial_profile(regions)[unknown]

    x, info = cg(A, rhs, x0=x0, rtol=CG_RTOL, atol=0.0, maxiter=20 * len(unknown))
    if info != 0:
        residual = np.linalg.norm(A @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        logger.error(f"Blending solve did not converge: relative residual {residual:.3e}")
        raise BlendingError(f"Blending solve did not converge (info={info}, relative residual {residual:.3e}).")

    values = fixed.copy()
    values[unknown] = x
    objective = float(np.sum(w * (J @ values) ** 2))
    values[unknown] = np.clip(x, 0.0, 1.0)
    logger.info(
        f"Blending function on {len(unknown)} sites, R_a={regions.atomistic_radius}, "
        f"L_b={regions.blending_width}, objective {objective:.6e}"
    )
    return BlendField(values, objective=objective)
