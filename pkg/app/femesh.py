import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .blending import BlendField, Region, Regions, compute_beta
from .lattice import BOND_TOL, LatticeModel, delaunay_triangles
from .utils import barycentric, min_angles, p1_gradients

logger = logging.getLogger(__name__)

FIRST_RING_GAP = 1.0  # first continuum ring sits one spacing outside the lattice zone
MIN_RING_NODES = 12
RING_STOP = 0.6  # skip a ring closer than this many spacings to the boundary
KEEP_MARGIN = 0.9
MIN_ANGLE_FLOOR = 10.0  # degrees, for elements created by bisection
LOCATE_CANDIDATES = 16
LOCATE_TOL = 1e-10
LOCATE_BUDGET = 2_000_000  # point-element pairs per brute-force batch


class MeshError(ValueError):
    """Raised for invalid mesh construction or refinement requests."""


class DomainTooSmallError(MeshError):
    """Raised when the atomistic/blending zone would reach the domain boundary."""


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # barycentric coordinates
    weights: np.ndarray  # fractions of |T|


P1_RULE = QuadratureRule(np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0]))
# edge midpoints, point i opposite vertex i
P2_RULE = QuadratureRule(np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]), np.full(3, 1 / 3))
RULES = {1: P1_RULE, 2: P2_RULE}

_NEXT = [1, 2, 0]
_PREV = [2, 0, 1]


def shape_values(order: int, lam: np.ndarray) -> np.ndarray:
    """
    Lagrange basis values at barycentric points: 3 vertex functions, plus 3 edge
    functions for order 2 (edge i is opposite vertex i).
    """
    if order == 1:
        return lam
    vertex = lam * (2 * lam - 1)
    edge = 4 * lam[:, _NEXT] * lam[:, _PREV]
    return np.hstack([vertex, edge])


def shape_gradients(order: int, lam: np.ndarray, grad_lam: np.ndarray) -> np.ndarray:
    if order == 1:
        return grad_lam
    vertex = (4 * lam - 1)[:, :, None] * grad_lam
    edge = 4 * (lam[:, _NEXT][:, :, None] * grad_lam[:, _PREV] + lam[:, _PREV][:, :, None] * grad_lam[:, _NEXT])
    return np.concatenate([vertex, edge], axis=1)


@dataclass(frozen=True)
class DofMap:
    """
    Active degrees of freedom. C maps DoF values to all extended nodes (vertices, then
    edges); boundary rows are zero and constrained midpoints average their endpoints.
    """

    n_dof: int
    C: sp.csr_matrix
    positions: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class QuadratureData:
    Dx: sp.csr_matrix
    Dy: sp.csr_matrix
    weights: np.ndarray
    beta: np.ndarray
    element: np.ndarray
    points: np.ndarray


@dataclass(frozen=True, eq=False)
class CoupledMesh:
    """
    Coupled partition: lattice-resolution triangles around the defect, graded continuum
    triangles outside. Vertex 0 of every element is its newest vertex, so (v1, v2) is
    the refinement edge. Vertices that are lattice sites carry the site number in node_site.
    """

    model: LatticeModel
    regions: Regions
    blend: BlendField
    nodes: np.ndarray
    node_site: np.ndarray
    elements: np.ndarray
    element_order: np.ndarray
    element_region: np.ndarray
    fe_order: int = 1
    coarsening: float = 1.5
    r_full: float = 0.0

    @property
    def n_vertices(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_dof(self) -> int:
        return self.dofs.n_dof

    @property
    def domain_radius(self) -> float:
        return self.model.domain_radius

    @cached_property
    def areas(self) -> np.ndarray:
        _, areas = p1_gradients(self.nodes, self.elements)
        return areas

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def node_beta(self) -> np.ndarray:
        return self.blend.node_values(self.node_site)

    @cached_property
    def _edge_data(self):
        local = self.elements[:, [1, 2, 2, 0, 0, 1]].reshape(-1, 2)
        pairs = np.sort(local, axis=1)
        keys = pairs[:, 0] * self.n_vertices + pairs[:, 1]
        unique, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True, return_counts=True)
        return pairs[first], inverse.reshape(-1, 3), counts

    @property
    def edges(self) -> np.ndarray:
        return self._edge_data[0]

    @property
    def element_edges(self) -> np.ndarray:
        """Edge ids per element; edge i is opposite vertex i."""
        return self._edge_data[1]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return self._edge_data[2] == 1

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return mask

    @cached_property
    def extended_nodes(self) -> np.ndarray:
        """(m, 6) vertex ids and edge-node ids (offset by n_vertices)."""
        return np.hstack([self.elements, self.n_vertices + self.element_edges])

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha1()
        for array in (self.nodes, self.elements, self.element_order, self.node_beta):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    @cached_property
    def dofs(self) -> DofMap:
        nv, n_edges = self.n_vertices, len(self.edges)
        free = np.flatnonzero(~self.boundary_nodes)
        p2 = self.element_order == 2
        in_p2 = np.zeros(n_edges, dtype=bool)
        in_p1 = np.zeros(n_edges, dtype=bool)
        in_p2[self.element_edges[p2].ravel()] = True
        in_p1[self.element_edges[~p2].ravel()] = True
        active = np.flatnonzero(in_p2 & ~in_p1 & ~self.boundary_edges)
        constrained = np.flatnonzero(in_p2 & ~np.isin(np.arange(n_edges), active))

        vertex_dof = np.full(nv, -1)
        vertex_dof[free] = np.arange(len(free))
        n_dof = len(free) + len(active)

        rows = [free, nv + active]
        cols = [vertex_dof[free], len(free) + np.arange(len(active))]
        vals = [np.ones(len(free)), np.ones(len(active))]
        for end in (0, 1):
            ends = self.edges[constrained, end]
            keep = vertex_dof[ends] >= 0
            rows.append(nv + constrained[keep])
            cols.append(vertex_dof[ends[keep]])
            vals.append(np.full(keep.sum(), 0.5))
        C = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nv + n_edges, n_dof),
        )
        midpoints = self.nodes[self.edges[active]].mean(axis=1)
        positions = np.vstack([self.nodes[free], midpoints])
        beta = np.concatenate([self.node_beta[free], self.node_beta[self.edges[active]].mean(axis=1)])
        return DofMap(n_dof, C, positions, beta)

    @cached_property
    def quadrature(self) -> QuadratureData:
        grad_lam, _ = p1_gradients(self.nodes, self.elements)
        rows, cols, vx, vy = [], [], [], []
        weights, beta, element, points = [], [], [], []
        n_qp = 0
        for order, rule in RULES.items():
            els = np.flatnonzero(self.element_order == order)
            if len(els) == 0:
                continue
            k = 3 if order == 1 else 6
            for lam_q, w_q in zip(rule.points, rule.weights):
                lam = np.tile(lam_q, (len(els), 1))
                dN = shape_gradients(order, lam, grad_lam[els])
                qp = n_qp + np.arange(len(els))
                rows.append(np.repeat(qp, k))
                cols.append(self.extended_nodes[els, :k].ravel())
                vx.append(dN[:, :, 0].ravel())
                vy.append(dN[:, :, 1].ravel())
                weights.append(w_q * self.areas[els])
                beta.append(self.node_beta[self.elements[els]] @ lam_q)
                element.append(els)
                points.append(np.einsum("k,nkd->nd", lam_q, self.nodes[self.elements[els]]))
                n_qp += len(els)
        shape = (n_qp, self.n_vertices + len(self.edges))
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        Dx = sp.csr_matrix((np.concatenate(vx), (rows, cols)), shape=shape) @ self.dofs.C
        Dy = sp.csr_matrix((np.concatenate(vy), (rows, cols)), shape=shape) @ self.dofs.C
        return QuadratureData(
            Dx=Dx.tocsr(),
            Dy=Dy.tocsr(),
            weights=np.concatenate(weights),
            beta=np.concatenate(beta),
            element=np.concatenate(element),
            points=np.vstack(points),
        )

    @cached_property
    def _locator(self) -> cKDTree:
        return cKDTree(self.centroids)

    def locate(self, points: np.ndarray):
        """
        Finds the element containing each point.

        Returns:
            tuple: (element ids, -1 where not found; (n, 3) barycentric coordinates).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        found = np.full(n, -1)
        lam = np.zeros((n, 3))
        if n == 0:
            return found, lam
        k = min(LOCATE_CANDIDATES, self.n_elements)
        _, cand = self._locator.query(points, k=k)
        cand = cand.reshape(n, k)
        corners = self.nodes[self.elements[cand.ravel()]]
        all_lam = barycentric(corners, np.repeat(points, k, axis=0)).reshape(n, k, 3)
        inside = all_lam.min(axis=2) >= -LOCATE_TOL
        hit = inside.any(axis=1)
        first = np.argmax(inside, axis=1)
        found[hit] = cand[hit, first[hit]]
        lam[hit] = all_lam[hit, first[hit]]

        missing = np.flatnonzero(~hit)
        all_corners = self.nodes[self.elements]
        batch = max(1, LOCATE_BUDGET // self.n_elements)
        for start in range(0, len(missing), batch):
            chunk = missing[start:start + batch]
            c = np.tile(all_corners, (len(chunk), 1, 1))
            p = np.repeat(points[chunk], self.n_elements, axis=0)
            chunk_lam = barycentric(c, p).reshape(len(chunk), self.n_elements, 3)
            inside = chunk_lam.min(axis=2) >= -LOCATE_TOL
            ok = inside.any(axis=1)
            which = np.argmax(inside, axis=1)
            found[chunk[ok]] = which[ok]
            lam[chunk[ok]] = chunk_lam[ok, which[ok]]
        return found, lam

    def _point_matrix(self, points: np.ndarray, elements: np.ndarray, lam: np.ndarray) -> sp.csr_matrix:
        """Rows evaluating the FE function at located points (extended-node columns)."""
        rows, cols, vals = [], [], []
        for order in (1, 2):
            sel = np.flatnonzero((elements >= 0) & (self.element_order[np.maximum(elements, 0)] == order))
            if len(sel) == 0:
                continue
            k = 3 if order == 1 else 6
            N = shape_values(order, lam[sel])
            rows.append(np.repeat(sel, k))
            cols.append(self.extended_nodes[elements[sel], :k].ravel())
            vals.append(N.ravel())
        shape = (len(points), self.n_vertices + len(self.edges))
        if not rows:
            return sp.csr_matrix(shape)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)

    def evaluation_matrix(self, points: np.ndarray) -> sp.csr_matrix:
        """Sparse (n_points, n_dof) map from DoF values to point values; zero outside the mesh."""
        elements, lam = self.locate(points)
        return (self._point_matrix(points, elements, lam) @ self.dofs.C).tocsr()

    @cached_property
    def interpolation(self) -> sp.csr_matrix:
        """
        Lattice interpolant I_a as a (n_sites, n_dof) matrix. Sites that are vertices
        map to their node; other domain sites are evaluated inside their element.
        """
        model = self.model
        ext = self.n_vertices + len(self.edges)
        is_node = self.node_site >= 0
        direct = sp.csr_matrix(
            (np.ones(is_node.sum()), (self.node_site[is_node], np.flatnonzero(is_node))),
            shape=(model.n_sites, ext),
        )
        covered = np.zeros(model.n_sites, dtype=bool)
        covered[self.node_site[is_node]] = True
        others = np.flatnonzero(model.in_domain & ~covered)
        elements, lam = self.locate(model.positions[others])

        n_boundary = max(self.boundary_nodes.sum(), 3)
        inscribed = self.domain_radius * np.cos(np.pi / n_boundary) - 1e-6
        lost = others[(elements < 0) & (model.radii[others] < inscribed)]
        if len(lost):
            logger.error(f"{len(lost)} lattice sites inside the domain are not covered by the mesh.")
            raise MeshError(f"Lattice site {int(lost[0])} at {model.positions[lost[0]]} lies in no element.")

        located = self._point_matrix(model.positions[others], elements, lam).tocoo()
        evaluated = sp.csr_matrix(
            (located.data, (others[located.row], located.col)), shape=(model.n_sites, ext)
        )
        return ((direct + evaluated) @ self.dofs.C).tocsr()

    def evaluate(self, U: np.ndarray, points: np.ndarray) -> np.ndarray:
        return self.evaluation_matrix(points) @ U

    def gradients(self, U: np.ndarray, elements: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """
        Displacement gradients (n, 2, 2), entry (i, j) = du_i/dx_j, at barycentric points.
        """
        values = self.dofs.C @ U
        grad_lam, _ = p1_gradients(self.nodes, self.elements[elements])
        out = np.zeros((len(elements), 2, 2))
        for order in (1, 2):
            sel = np.flatnonzero(self.element_order[elements] == order)
            if len(sel) == 0:
                continue
            k = 3 if order == 1 else 6
            dN = shape_gradients(order, lam[sel], grad_lam[sel])
            local = values[self.extended_nodes[elements[sel], :k]]
            out[sel] = np.einsum("nki,nkj->nij", local, dN)
        return out

    def element_beta(self) -> np.ndarray:
        """Blending value at element barycenters."""
        return self.node_beta[self.elements].mean(axis=1)


def ring(radius: float, spacing: float, phase: int) -> np.ndarray:
    n = max(MIN_RING_NODES, int(np.ceil(2 * np.pi * radius / spacing)))
    theta = (np.arange(n) + 0.5 * (phase % 2)) * 2 * np.pi / n
    return radius * np.column_stack([np.cos(theta), np.sin(theta)])


def ring_cloud(r_start: float, r_end: float, coarsening: float, spacing: float = 1.0):
    """
    Concentric rings from r_start outwards, spacing multiplied by coarsening from ring to
    ring, closed by a boundary ring at r_end.

    Returns:
        list: (radius, spacing, points) per ring, the boundary ring last.
    """
    rings = []
    r, h, k = r_start, spacing, 0
    while r_end - r >= RING_STOP * h:
        rings.append((r, h, ring(r, h, k)))
        k += 1
        h *= coarsening
        r += h
    rings.append((r_end, h, ring(r_end, h, k)))
    return rings


def lattice_zone_radius(model: LatticeModel, regions: Regions) -> float:
    """
    Radius of the zone kept at full lattice resolution: every site within one cutoff
    plus one layer of the outer blending radius lies inside it.
    """
    reach = regions.outer_radius + model.spec.cutoff + 1.0
    near = model.in_domain & (regions.distance <= reach + BOND_TOL)
    if not near.any():
        return 0.0
    return float(model.radii[near].max())


def _continuum_cloud(r_full: float, radius: float, coarsening: float, kept: Optional[np.ndarray]) -> np.ndarray:
    rings = ring_cloud(r_full + FIRST_RING_GAP, radius, coarsening)
    if kept is None or len(kept) == 0:
        return np.vstack([points for _, _, points in rings])
    r_first = np.linalg.norm(kept, axis=1).min()
    fresh = [points for r, h, points in rings[:-1] if r + RING_STOP * h <= r_first]
    return np.vstack(fresh + [kept])


def _orient(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Rotates each triangle so the edge opposite vertex 0 is its longest."""
    p = nodes[elements]
    lengths = np.stack([np.linalg.norm(p[:, _NEXT[i]] - p[:, _PREV[i]], axis=1) for i in range(3)], axis=1)
    k = np.argmax(lengths, axis=1)
    roll = (k[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(elements, roll, axis=1)


def _labels(node_site: np.ndarray, node_beta: np.ndarray, elements: np.ndarray, fe_order: int):
    vb = node_beta[elements]
    all_lattice = (node_site[elements] >= 0).all(axis=1)
    region = np.full(len(elements), Region.continuum, dtype=np.int8)
    region[all_lattice & (vb.min(axis=1) < 1)] = Region.blending
    region[all_lattice & (vb.max(axis=1) <= 0)] = Region.atomistic
    order = np.where(vb.min(axis=1) >= 1, fe_order, 1).astype(np.int8)
    return region, order


def _make_mesh(model, regions, blend, nodes, node_site, elements, fe_order, coarsening, r_full) -> CoupledMesh:
    region, order = _labels(node_site, blend.node_values(node_site), elements, fe_order)
    return CoupledMesh(
        model=model,
        regions=regions,
        blend=blend,
        nodes=nodes,
        node_site=node_site,
        elements=elements,
        element_order=order,
        element_region=region,
        fe_order=fe_order,
        coarsening=coarsening,
        r_full=r_full,
    )


def assemble_mesh(
    model: LatticeModel,
    regions: Regions,
    fe_order: int = 1,
    coarsening: float = 1.5,
    kept_nodes: Optional[np.ndarray] = None,
    blend: Optional[BlendField] = None,
) -> CoupledMesh:
    """
    Triangulates the lattice zone together with the continuum node cloud.

    Parameters:
        model (LatticeModel): The lattice.
        regions (Regions): Region radii around the defect.
        fe_order (int): Finite element order where the blending function is 1.
        coarsening (float): Spacing ratio between consecutive continuum rings.
        kept_nodes (np.ndarray, optional): Continuum nodes to reuse from a previous mesh.
        blend (BlendField, optional): Blending values; computed from regions when omitted.

    Returns:
        CoupledMesh: The labelled mesh.
    """
    blend = blend if blend is not None else compute_beta(regions, model)
    r_full = lattice_zone_radius(model, regions)
    radius = model.domain_radius
    if r_full + FIRST_RING_GAP >= radius - RING_STOP:
        zone = np.flatnonzero(model.in_domain)
        cloud = np.zeros((0, 2))
        r_full = radius
    else:
        zone = np.flatnonzero(model.in_domain & (model.radii <= r_full + BOND_TOL))
        cloud = _continuum_cloud(r_full, radius, coarsening, kept_nodes)

    nodes = np.vstack([model.positions[zone], cloud])
    node_site = np.concatenate([zone, np.full(len(cloud), -1)])
    elements = _orient(nodes, delaunay_triangles(nodes))
    mesh = _make_mesh(model, regions, blend, nodes, node_site, elements, fe_order, coarsening, r_full)
    logger.info(
        f"Mesh with {mesh.n_vertices} vertices, {mesh.n_elements} elements, {mesh.n_dof} DoF "
        f"(R_a={regions.atomistic_radius}, L_b={regions.blending_width}, lattice zone radius {r_full:.2f})"
    )
    return mesh


def build_initial_mesh(
    model: LatticeModel, R_a: float, L_b: float, coarsening: float = 1.5, fe_order: int = 1
) -> CoupledMesh:
    """
    Builds the initial coupled mesh: lattice resolution around the defect, graded rings outside.

    Raises:
        MeshError: If the radii are negative or R_a + L_b reaches the domain radius.
    """
    if R_a < 0 or L_b < 0 or R_a + L_b >= model.domain_radius:
        raise MeshError(
            f"Radii must satisfy 0 <= R_a, 0 <= L_b and R_a + L_b < R_Omega; "
            f"got R_a={R_a}, L_b={L_b}, R_Omega={model.domain_radius}."
        )
    if fe_order not in (1, 2):
        raise MeshError(f"Finite element order must be 1 or 2, got {fe_order}.")
    if coarsening < 1:
        raise MeshError(f"Coarsening factor must be at least 1, got {coarsening}.")
    regions = Regions.for_model(model, R_a, L_b)
    return assemble_mesh(model, regions, fe_order, coarsening)


def full_atomistic_mesh(model: LatticeModel) -> CoupledMesh:
    """The domain triangulation with every element atomistic and the blending function zero."""
    sites = np.flatnonzero(model.in_domain)
    remap = np.full(model.n_sites, -1)
    remap[sites] = np.arange(len(sites))
    nodes = model.positions[sites]
    elements = _orient(nodes, remap[model.triangles])
    regions = Regions.for_model(model, model.domain_radius + model.spec.halo, 0.0)
    blend = BlendField.constant(model, 0.0)
    return _make_mesh(model, regions, blend, nodes, sites, elements, 1, 1.0, model.domain_radius)


def interpolate_to_lattice(mesh: CoupledMesh, U: np.ndarray, model: Optional[LatticeModel] = None) -> np.ndarray:
    """
    Values of the FE displacement at every lattice site; zero outside the mesh.
    """
    if model is None or model is mesh.model:
        return mesh.interpolation @ U
    values = np.zeros((model.n_sites, 2))
    inside = np.flatnonzero(model.radii <= mesh.domain_radius + BOND_TOL)
    values[inside] = mesh.evaluate(U, model.positions[inside])
    return values


def quadrature_apply(mesh: CoupledMesh, element: int, g: Callable[[np.ndarray], np.ndarray]) -> float:
    """
    Integrates g over one element with the element's rule: barycenter for P1,
    edge midpoints with weights 1/3 for P2.
    """
    rule = RULES[int(mesh.element_order[element])]
    corners = mesh.nodes[mesh.elements[element]]
    points = rule.points @ corners
    values = np.asarray(g(points), dtype=float).reshape(len(points))
    return float(abs(mesh.areas[element]) * np.dot(rule.weights, values))


def bisect(mesh: CoupledMesh, marked) -> CoupledMesh:
    """
    Newest-vertex bisection of the marked continuum elements with conformity closure.
    Edges of atomistic and blending elements are never split; marks whose refinement
    edge is blocked by them are dropped.

    Newest-vertex bisection keeps every descendant in a few similarity classes of its
    ancestor, with angles at least about half of the ancestor's smallest angle. New elements
    below MIN_ANGLE_FLOOR therefore signal a broken newest-vertex orientation and are rejected.

    Parameters:
        mesh (CoupledMesh): The mesh to refine.
        marked: Element ids to bisect.

    Returns:
        CoupledMesh: The refined mesh (the same object when nothing is marked).

    Raises:
        MeshError: If a marked element is not continuum, or a new element falls below
            the minimum angle floor.
    """
    marked = np.unique(np.asarray(list(marked), dtype=int))
    if len(marked) == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_elements:
        raise MeshError(f"Marked element ids must lie in [0, {mesh.n_elements}).")
    not_continuum = marked[mesh.element_region[marked] != Region.continuum]
    if len(not_continuum):
        raise MeshError(f"Element {int(not_continuum[0])} is not a continuum element and cannot be bisected.")

    element_edges = mesh.element_edges
    base = element_edges[:, 0]
    blocked = np.zeros(len(mesh.edges), dtype=bool)
    blocked[element_edges[mesh.element_region != Region.continuum].ravel()] = True
    while True:
        spread = element_edges[blocked[base]][:, 1:].ravel()
        if blocked[spread].all():
            break
        blocked[spread] = True

    usable = ~blocked[base[marked]]
    if not usable.all():
        logger.warning(f"Dropped {int((~usable).sum())} marked elements next to the lattice-resolution zone.")
    marked = marked[usable]
    if len(marked) == 0:
        return mesh

    cut = np.zeros(len(mesh.edges), dtype=bool)
    cut[base[marked]] = True
    while True:
        pending = cut[element_edges].any(axis=1) & ~cut[base]
        if not pending.any():
            break
        cut[base[pending]] = True

    cut_edges = np.flatnonzero(cut)
    nv = mesh.n_vertices
    n_total = nv + len(cut_edges)
    new_ids = nv + np.arange(len(cut_edges))
    cut_pairs = mesh.edges[cut_edges]
    cut_keys = cut_pairs[:, 0] * n_total + cut_pairs[:, 1]
    order = np.argsort(cut_keys)
    cut_keys, new_ids = cut_keys[order], new_ids[order]
    nodes = np.vstack([mesh.nodes, mesh.nodes[cut_pairs].mean(axis=1)[order]])
    node_site = np.concatenate([mesh.node_site, np.full(len(cut_edges), -1)])

    elements = mesh.elements.copy()
    touched = np.zeros(len(elements), dtype=bool)
    while True:
        a = np.minimum(elements[:, 1], elements[:, 2])
        b = np.maximum(elements[:, 1], elements[:, 2])
        keys = a * n_total + b
        pos = np.minimum(np.searchsorted(cut_keys, keys), len(cut_keys) - 1)
        split = np.flatnonzero(cut_keys[pos] == keys)
        if len(split) == 0:
            break
        mid = new_ids[pos[split]]
        v0, v1, v2 = elements[split, 0], elements[split, 1], elements[split, 2]
        elements[split] = np.column_stack([mid, v0, v1])
        elements = np.vstack([elements, np.column_stack([mid, v2, v0])])
        touched[split] = True
        touched = np.concatenate([touched, np.ones(len(split), dtype=bool)])

    changed = np.flatnonzero(touched)
    angles = min_angles(nodes, elements[changed])
    worst = int(np.argmin(angles))
    if angles[worst] < MIN_ANGLE_FLOOR:
        e = int(changed[worst])
        logger.error(f"Bisection produced element {e} with minimum angle {angles[worst]:.2f} degrees.")
        raise MeshError(
            f"Bisection would create element {e} {tuple(int(v) for v in elements[e])} with minimum angle "
            f"{angles[worst]:.2f} below the {MIN_ANGLE_FLOOR} degree floor."
        )

    refined = _make_mesh(
        mesh.model, mesh.regions, mesh.blend, nodes, node_site, elements, mesh.fe_order, mesh.coarsening, mesh.r_full
    )
    logger.info(f"Bisected {len(marked)} marked elements: {mesh.n_elements} -> {refined.n_elements} elements.")
    return refined


def expand_regions(mesh: CoupledMesh, model: LatticeModel, atomistic_layers: int, blending_layers: int) -> CoupledMesh:
    """
    Moves the atomistic radius out by atomistic_layers and the outer blending radius by
    blending_layers, recomputes the blending function and rebuilds the mesh. Continuum
    nodes outside the new lattice zone are kept, so earlier refinement survives.

    Raises:
        MeshError: If a layer count is negative.
        DomainTooSmallError: If the lattice zone would reach the domain boundary.
    """
    if atomistic_layers < 0 or blending_layers < 0:
        raise MeshError(f"Layer counts must be nonnegative, got ({atomistic_layers}, {blending_layers}).")
    if atomistic_layers == 0 and blending_layers == 0:
        return mesh
    regions = mesh.regions.expanded(atomistic_layers, blending_layers)
    r_full = lattice_zone_radius(model, regions)
    if r_full + FIRST_RING_GAP + RING_STOP >= model.domain_radius or regions.outer_radius >= model.domain_radius:
        raise DomainTooSmallError(
            f"Expanded regions (outer radius {regions.outer_radius}) reach the domain boundary "
            f"R_Omega={model.domain_radius}; enlarge the domain."
        )
    radii = np.linalg.norm(mesh.nodes, axis=1)
    kept = mesh.nodes[(mesh.node_site < 0) & (radii > r_full + KEEP_MARGIN)]
    return assemble_mesh(model, regions, mesh.fe_order, mesh.coarsening, kept_nodes=kept)


def enlarge_domain(mesh: CoupledMesh, model: LatticeModel) -> CoupledMesh:
    """
    Rebuilds a mesh on a larger lattice: the old interior continuum nodes stay and new
    rings continue the grading from the old boundary out to the new one.
    """
    old_radius = mesh.domain_radius
    if model.domain_radius <= old_radius:
        raise MeshError(f"New domain radius {model.domain_radius} must exceed {old_radius}.")
    regions = Regions.for_model(model, mesh.regions.atomistic_radius, mesh.regions.blending_width)
    radii = np.linalg.norm(mesh.nodes, axis=1)
    keep = (mesh.node_site < 0) & (radii < old_radius - 1e-6) & (radii > mesh.r_full + KEEP_MARGIN)
    interior = mesh.nodes[keep]
    spacing = 2 * np.pi * old_radius / max(int(mesh.boundary_nodes.sum()), MIN_RING_NODES)
    outer = np.vstack([points for _, _, points in ring_cloud(old_radius, model.domain_radius, mesh.coarsening, spacing)])
    return assemble_mesh(model, regions, mesh.fe_order, mesh.coarsening, kept_nodes=np.vstack([interior, outer]))


def transfer(mesh: CoupledMesh, U: np.ndarray, new_mesh: CoupledMesh) -> np.ndarray:
    """Evaluates a displacement at the DoF positions of another mesh."""
    return mesh.evaluate(U, new_mesh.dofs.positions)


def write_mesh(mesh: CoupledMesh, path) -> None:
    """
    Writes the mesh as text: one node per line (id x y kind), then one element per line
    (id n1 n2 n3 order region beta).
    """
    beta = mesh.element_beta()
    names = {int(r): r.name for r in Region}
    with open(path, "w") as handle:
        handle.write("# nodes: id x y kind\n")
        for i, (x, y) in enumerate(mesh.nodes):
            handle.write(f"{i} {x:.12g} {y:.12g} vertex\n")
        n = mesh.n_vertices
        for j, (x, y) in enumerate(mesh.dofs.positions[int((~mesh.boundary_nodes).sum()):]):
            handle.write(f"{n + j} {x:.12g} {y:.12g} edge-midpoint\n")
        handle.write("# elements: id n1 n2 n3 order region beta\n")
        for e, (v0, v1, v2) in enumerate(mesh.elements):
            handle.write(
                f"{e} {v0} {v1} {v2} {mesh.element_order[e]} {names[int(mesh.element_region[e])]} {beta[e]:.12g}\n"
            )
    logger.info(f"Mesh written to {path}")
