import csv
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu
from scipy.spatial import cKDTree

from .blending import Region
from .coupling import AtomisticBlock, FarField, Scheme
from .femesh import CoupledMesh
from .lattice import AREA_TOL, LatticeModel, StencilError
from .utils import barycentric, clip_polygon, p1_gradients, polygon_area

logger = logging.getLogger(__name__)

CG_RTOL = 1e-10
INSIDE_TOL = 1e-10
OUTER_FRACTION = 0.5  # truncation indicator integrates outside B(R_Omega / 2)


class EstimatorError(RuntimeError):
    """Raised when the auxiliary Poisson problem or the force interpolant cannot be built."""


@dataclass(frozen=True, eq=False)
class ResidualForces:
    """Atomistic forces at I_a u_h, one 2-vector per site; zero outside the domain."""

    model: LatticeModel
    values: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.values.sum(axis=0)


@dataclass(frozen=True, eq=False)
class ForceInterpolant:
    """Nodal values c_l F_l of the rescaled P1 force field on the domain triangulation."""

    values: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True, eq=False)
class PoissonSolution:
    values: np.ndarray  # (n_sites, 2) nodal values
    gradients: np.ndarray  # (n_triangles, 2, 2), entry (k, j) = d phi_k / dx_j


@dataclass
class EstimateReport:
    """
    eta_local sums to eta and mu_E_local to mu_E. eta_E_local = eta_T eta + |mu_E(T)| is an
    upper bound: its sum is at least eta_E, with equality when all mu_E(T) share a sign.
    """

    eta: float
    rho_tr: float
    eta_local: np.ndarray
    mu_E: float = float("nan")
    mu_E_local: Optional[np.ndarray] = None
    eta_E: float = float("nan")
    eta_E_local: Optional[np.ndarray] = None

    @property
    def has_energy(self) -> bool:
        return self.mu_E_local is not None


def residual_forces(model: LatticeModel, u_lattice: np.ndarray, far_field: FarField) -> ResidualForces:
    """
    Gradient of the atomistic energy at the lattice displacement u_lattice, taken over all
    sites with complete stencils and kept at the domain sites.

    Raises:
        StencilError: If u_lattice does not cover every site or has non-finite entries.
    """
    u = np.asarray(u_lattice, dtype=float)
    if u.shape != (model.n_sites, 2):
        raise StencilError(f"Lattice displacement must have shape {(model.n_sites, 2)}, got {u.shape}.")
    if not np.all(np.isfinite(u)):
        raise StencilError("Lattice displacement has non-finite entries in the halo or the domain.")
    owners = np.flatnonzero(model.complete)
    block = AtomisticBlock(model, far_field.potential, owners, np.ones(len(owners)), far_field.predictor)
    values = np.zeros((model.n_sites, 2))
    values[block.local_sites] = block.gradient(u[block.local_sites])
    values[~model.in_domain] = 0.0
    return ResidualForces(model, values)


def _vertices(model: LatticeModel) -> np.ndarray:
    return np.unique(model.triangles)


def rescaled_interpolant(model: LatticeModel, forces: ResidualForces) -> ForceInterpolant:
    """
    Scales each nodal force by c_l = 1 / integral of the hat function at l.

    Raises:
        EstimatorError: If a vertex patch has zero measure.
    """
    areas = np.abs(model.triangle_areas)
    patch = np.bincount(model.triangles.ravel(), weights=np.repeat(areas / 3.0, 3), minlength=model.n_sites)
    vertices = _vertices(model)
    if len(vertices) and patch[vertices].min() <= AREA_TOL:
        bad = vertices[np.argmin(patch[vertices])]
        raise EstimatorError(f"Vertex patch of site {bad} has zero measure.")
    scale = np.zeros(model.n_sites)
    scale[vertices] = 1.0 / patch[vertices]
    orphan = model.in_domain & (scale == 0) & np.any(forces.values != 0, axis=1)
    if orphan.any():
        logger.warning(f"{int(orphan.sum())} domain sites with nonzero force are not triangulation vertices.")
    return ForceInterpolant(scale[:, None] * forces.values, scale)


def p1_matrices(points: np.ndarray, triangles: np.ndarray, n: Optional[int] = None):
    """
    Assembled P1 stiffness and consistent mass matrices.

    Returns:
        tuple: (K, M) as CSR matrices of size n x n.
    """
    n = len(points) if n is None else n
    grads, areas = p1_gradients(points, triangles)
    a = np.abs(areas)
    K_local = a[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    M_local = (a / 12.0)[:, None, None] * (np.ones((3, 3)) + np.eye(3))[None]
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    K = sp.csr_matrix((K_local.ravel(), (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((M_local.ravel(), (rows, cols)), shape=(n, n))
    return K, M


def triangle_gradients(points: np.ndarray, triangles: np.ndarray, values: np.ndarray) -> np.ndarray:
    grads, _ = p1_gradients(points, triangles)
    return np.einsum("tik,tij->tkj", values[triangles], grads)


def poisson_p1(points: np.ndarray, triangles: np.ndarray, load: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """
    Solves int grad phi . grad v = int f v for each component of a P1 load f, with phi
    zero at the fixed nodes, by conjugate gradients.

    Parameters:
        points (np.ndarray): (n, 2) node positions.
        triangles (np.ndarray): (m, 3) triangles.
        load (np.ndarray): (n, 2) nodal values of f.
        fixed (np.ndarray): Node ids where phi vanishes.

    Returns:
        np.ndarray: (n, 2) nodal values of phi, zero off the triangulation.

    Raises:
        EstimatorError: If conjugate gradients stagnates.
    """
    n = len(points)
    K, M = p1_matrices(points, triangles, n)
    rhs = M @ load
    free = np.setdiff1d(np.unique(triangles), fixed)
    A = K[free][:, free].tocsr()
    phi = np.zeros((n, 2))
    for k in range(2):
        b = rhs[free, k]
        if not np.any(b):
            continue
        x, info = cg(A, b, rtol=CG_RTOL, atol=0.0, maxiter=10 * len(free))
        if info != 0:
            residual = np.linalg.norm(A @ x - b) / np.linalg.norm(b)
            logger.error(f"Poisson solve stagnated: relative residual {residual:.3e}")
            raise EstimatorError(f"Poisson CG did not converge (info={info}, relative residual {residual:.3e}).")
        phi[free, k] = x
    return phi


def solve_phi(model: LatticeModel, interpolant: ForceInterpolant) -> PoissonSolution:
    """Auxiliary Poisson problem on the domain triangulation, zero on its boundary."""
    values = poisson_p1(model.positions, model.triangles, interpolant.values, model.boundary_sites)
    return PoissonSolution(values, triangle_gradients(model.positions, model.triangles, values))


def gradient_energies(model: LatticeModel, phi: PoissonSolution) -> np.ndarray:
    """|T'| |grad phi|^2 per lattice triangle."""
    return np.abs(model.triangle_areas) * np.sum(phi.gradients**2, axis=(1, 2))


def eta(model: LatticeModel, phi: PoissonSolution) -> float:
    return float(np.sqrt(np.sum(gradient_energies(model, phi))))


def p1_l2_squared(areas: np.ndarray, nodal: np.ndarray) -> np.ndarray:
    """Exact squared L2 norm of a P1 vector field per triangle; nodal is (m, 3, 2)."""
    return (np.abs(areas) / 12.0) * (np.sum(nodal**2, axis=(1, 2)) + np.sum(nodal.sum(axis=1) ** 2, axis=1))


def rho_tr(model: LatticeModel, interpolant: ForceInterpolant, phi: PoissonSolution) -> float:
    """
    R_Omega times the L2 norm of the force interpolant plus the L2 norm of grad phi,
    both over triangles with barycenter outside B(R_Omega / 2).
    """
    tris = model.triangles
    outer = np.linalg.norm(model.positions[tris].mean(axis=1), axis=1) >= OUTER_FRACTION * model.domain_radius
    force_sq = p1_l2_squared(model.triangle_areas[outer], interpolant.values[tris[outer]]).sum()
    grad_sq = gradient_energies(model, phi)[outer].sum()
    return float(model.domain_radius * np.sqrt(force_sq) + np.sqrt(grad_sq))


def overlap_matrix(mesh: CoupledMesh, points: np.ndarray, triangles: np.ndarray) -> sp.csr_matrix:
    """
    Fractions |T' n T| / |T'| as a sparse (n_triangles, n_elements) matrix whose rows
    sum to one. Triangles inside a single element get weight 1 directly; the rest are
    clipped against the elements around them and normalised.
    """
    corners = points[triangles]
    bary = corners.mean(axis=1)
    host, _ = mesh.locate(bary)
    lost = host < 0
    if lost.any():
        _, host[lost] = cKDTree(mesh.centroids).query(bary[lost])
    host_corners = mesh.nodes[mesh.elements[host]]
    inside = np.ones(len(triangles), dtype=bool)
    for k in range(3):
        inside &= barycentric(host_corners, corners[:, k]).min(axis=1) >= -INSIDE_TOL

    rows = [np.flatnonzero(inside)]
    cols = [host[inside]]
    vals = [np.ones(inside.sum())]

    straddling = np.flatnonzero(~inside)
    if len(straddling):
        incidence = sp.csr_matrix(
            (np.ones(mesh.elements.size), (mesh.elements.ravel(), np.repeat(np.arange(mesh.n_elements), 3))),
            shape=(mesh.n_vertices, mesh.n_elements),
        )
        vertex_host, _ = mesh.locate(corners[straddling].reshape(-1, 2))
        vertex_host = vertex_host.reshape(-1, 3)
        lo_el = mesh.nodes[mesh.elements].min(axis=1)
        hi_el = mesh.nodes[mesh.elements].max(axis=1)
        for j, t in enumerate(straddling):
            seeds = np.unique(np.append(vertex_host[j][vertex_host[j] >= 0], host[t]))
            candidates = np.unique(incidence[mesh.elements[seeds].ravel()].indices)
            lo, hi = corners[t].min(axis=0), corners[t].max(axis=0)
            near = np.all((lo_el[candidates] <= hi) & (hi_el[candidates] >= lo), axis=1)
            candidates = candidates[near]
            areas = np.array(
                [polygon_area(clip_polygon(corners[t], mesh.nodes[mesh.elements[c]])) for c in candidates]
            )
            total = areas.sum() if len(areas) else 0.0
            if total <= 0:
                rows.append(np.array([t]))
                cols.append(np.array([host[t]]))
                vals.append(np.ones(1))
                continue
            keep = areas > 0
            rows.append(np.full(keep.sum(), t))
            cols.append(candidates[keep])
            vals.append(areas[keep] / total)
        logger.debug(f"Clipped {len(straddling)} lattice triangles against the coupled mesh.")

    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(triangles), mesh.n_elements),
    )


def eta_local(mesh: CoupledMesh, phi: PoissonSolution, eta_value: float, overlap=None) -> np.ndarray:
    """
    Per-element share of eta: the squared gradient norm of every lattice triangle split by
    overlap fraction, divided by eta. Sums to eta.
    """
    if eta_value <= 0:
        return np.zeros(mesh.n_elements)
    model = mesh.model
    if overlap is None:
        overlap = overlap_matrix(mesh, model.positions, model.triangles)
    return np.asarray(overlap.T @ gradient_energies(model, phi)) / eta_value


def _interior_hosts(mesh: CoupledMesh) -> np.ndarray:
    """
    Element holding each site strictly inside it together with all of its triangle
    neighbours; -1 for sites whose patch reaches an element boundary.
    """
    model = mesh.model
    sites = np.flatnonzero(model.in_domain)
    host = np.full(model.n_sites, -1)
    found, lam = mesh.locate(model.positions[sites])
    strict = (found >= 0) & (lam.min(axis=1) > INSIDE_TOL)
    host[sites[strict]] = found[strict]
    tris = model.triangles
    a, b = tris.ravel(), tris[:, [1, 2, 0]].ravel()
    broken = host[a] != host[b]
    interior = host.copy()
    interior[a[broken]] = -1
    interior[b[broken]] = -1
    return interior


def _cb_energies(far_field: FarField, G: np.ndarray, linearized: bool) -> np.ndarray:
    """W(G_B + G) - W(G_B) per gradient, minus its linear part when linearized."""
    cb = far_field.cb
    values = cb.energy(far_field.predictor + G) - cb.energy(far_field.predictor)
    if linearized:
        values = values - np.einsum("ij,nij->n", cb.stress(far_field.predictor), G)
    return values


def energy_estimator(mesh: CoupledMesh, far_field: FarField, U: np.ndarray, scheme: Scheme, overlap=None):
    """
    Consistency part of the energy error, split by element.

    Blending elements T (lattice triangles) carry
        1/6 sum_{l in T} beta(l) V_l(Du_h^a(l)) - beta_T |T| W(grad_T u_h).
    Continuum elements T carry the band of lattice triangles T' overlapping T whose
    vertex patch touches the boundary of T:
        |T n T'| / (2 |T'|) (1/3 sum_{l in T'} V_l(Du_h^a(l)) - V(grad u_h R)),
    with grad u_h taken from T at the barycenter of T'. Lattice triangles whose patch lies
    inside T are skipped. BGFC uses V'' and W''.

    Returns:
        tuple: (mu_E, per-element mu_E(T)).

    Raises:
        ValueError: For BQCF, which has no energy functional.
    """
    scheme = Scheme(scheme)
    if scheme is Scheme.bqcf:
        raise ValueError("BQCF has no energy functional, so it has no energy estimator.")
    linearized = scheme is Scheme.bgfc
    model = mesh.model
    tris = model.triangles
    beta = mesh.blend.site_values
    local = np.zeros(mesh.n_elements)

    blending = np.flatnonzero(mesh.element_region == Region.blending)
    blend_sites = mesh.node_site[mesh.elements[blending]]

    if overlap is None:
        overlap = overlap_matrix(mesh, model.positions, tris)
    pairs = sp.coo_matrix(overlap)
    on_continuum = (mesh.element_region[pairs.col] == Region.continuum) & (pairs.data > 0)
    t, e, fraction = pairs.row[on_continuum], pairs.col[on_continuum], pairs.data[on_continuum]
    inside = (_interior_hosts(mesh)[tris[t]] == e[:, None]).all(axis=1)
    t, e, fraction = t[~inside], e[~inside], fraction[~inside]

    needed = np.unique(np.concatenate([blend_sites.ravel(), tris[t].ravel()]))
    if len(needed) == 0:
        return 0.0, local
    block = AtomisticBlock(model, far_field.potential, needed, np.ones(len(needed)), far_field.predictor)
    u_local = mesh.interpolation[block.local_sites] @ U
    V = np.zeros(model.n_sites)
    V[needed] = block.linearized_site_energies(u_local) if linearized else block.site_energies(u_local)

    if len(blending):
        site_beta = beta[blend_sites]
        G = mesh.gradients(U, blending, np.full((len(blending), 3), 1.0 / 3.0))
        local[blending] += (site_beta * V[blend_sites]).sum(axis=1) / 6.0
        local[blending] -= site_beta.mean(axis=1) * np.abs(mesh.areas[blending]) * _cb_energies(far_field, G, linearized)

    if len(t):
        bary = model.positions[tris[t]].mean(axis=1)
        lam = barycentric(mesh.nodes[mesh.elements[e]], bary)
        G = mesh.gradients(U, e, lam)
        homogeneous = far_field.cb.volume * _cb_energies(far_field, G, linearized)
        terms = 0.5 * fraction * (V[tris[t]].mean(axis=1) - homogeneous)
        local += np.bincount(e, weights=terms, minlength=mesh.n_elements)
        logger.debug(f"Energy estimator interface band: {len(t)} lattice triangle overlaps.")
    return float(local.sum()), local


def residual_dual_norm(model: LatticeModel, forces: ResidualForces) -> float:
    """sqrt(F^T K^-1 F) with K the P1 stiffness on the interior vertices of the domain triangulation."""
    K, _ = p1_matrices(model.positions, model.triangles, model.n_sites)
    free = np.setdiff1d(_vertices(model), model.boundary_sites)
    if len(free) == 0:
        return 0.0
    F = forces.values[free]
    x = splu(sp.csc_matrix(K[free][:, free])).solve(F)
    return float(np.sqrt(max(np.sum(F * x), 0.0)))


def estimate(
    mesh: CoupledMesh, far_field: FarField, U: np.ndarray, scheme: Scheme, with_energy: bool = True
) -> EstimateReport:
    """
    Runs the full a posteriori pipeline for one coupled solution.

    Parameters:
        mesh (CoupledMesh): The mesh of the solution.
        far_field (FarField): Potential and loading.
        U (np.ndarray): (n_dof, 2) coefficients.
        scheme (Scheme): Coupling scheme; the energy part is skipped for BQCF.
        with_energy (bool): Whether to compute mu_E and eta_E.

    Returns:
        EstimateReport: Global and per-element estimators.
    """
    model = mesh.model
    forces = residual_forces(model, mesh.interpolation @ U, far_field)
    interpolant = rescaled_interpolant(model, forces)
    phi = solve_phi(model, interpolant)
    eta_value = eta(model, phi)
    rho = rho_tr(model, interpolant, phi)
    overlap = overlap_matrix(mesh, model.positions, model.triangles)
    local = eta_local(mesh, phi, eta_value, overlap)
    report = EstimateReport(eta=eta_value, rho_tr=rho, eta_local=local)

    if with_energy and Scheme(scheme) is not Scheme.bqcf:
        mu, mu_local = energy_estimator(mesh, far_field, U, scheme, overlap)
        report.mu_E = mu
        report.mu_E_local = mu_local
        report.eta_E = eta_value**2 + abs(mu)
        report.eta_E_local = local * eta_value + np.abs(mu_local)

    logger.info(
        f"Estimate on {mesh.n_dof} DoF: eta={eta_value:.6e}, rho_tr={rho:.6e}"
        + (f", eta_E={report.eta_E:.6e}" if report.has_energy else "")
    )
    return report


def write_estimate(report: EstimateReport, path) -> None:
    """Per-element CSV: element, eta_T, mu_E_T, eta_E_T."""
    n = len(report.eta_local)
    mu = report.mu_E_local if report.has_energy else np.full(n, np.nan)
    eta_E = report.eta_E_local if report.has_energy else np.full(n, np.nan)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["element", "eta_T", "mu_E_T", "eta_E_T"])
        for e in range(n):
            writer.writerow([e, repr(float(report.eta_local[e])), repr(float(mu[e])), repr(float(eta_E[e]))])
