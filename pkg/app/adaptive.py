import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .blending import Region
from .coupling import G_TOL, MAX_ITER, Displacement, FarField, MethodSpec, Scheme, solve
from .estimator import EstimateReport, estimate
from .femesh import (
    CoupledMesh,
    DomainTooSmallError,
    bisect,
    build_initial_mesh,
    enlarge_domain,
    expand_regions,
    transfer,
)
from .lattice import LatticeSpec, build_lattice
from .utils import round_half_up

logger = logging.getLogger(__name__)

DORFLER_FRACTION = 0.5
ENLARGE_FACTOR = 1.5


class MarkTarget(str, Enum):
    geometry = "geometry"
    energy = "energy"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for member in cls:
                if member.value == value.lower():
                    return member
        return None


@dataclass(frozen=True)
class AdaptParams:
    N_max: int = 20000
    eta_tol: float = 1e-6
    tau1: float = 1.0
    tau2: float = 0.7
    K: int = 5
    theta_iters: int = 30
    max_steps: int = 30
    max_enlargements: int = 3
    target: MarkTarget = MarkTarget.geometry

    def __post_init__(self):
        object.__setattr__(self, "target", MarkTarget(self.target))
        if not 0 < self.tau2 < 1:
            raise ValueError(f"tau2 must lie in (0, 1), got {self.tau2}.")
        if not self.tau1 > 0:
            raise ValueError(f"tau1 must be positive, got {self.tau1}.")
        if self.K < 1:
            raise ValueError(f"K must be at least 1, got {self.K}.")
        if self.N_max < 1 or self.max_steps < 1 or self.theta_iters < 1:
            raise ValueError("N_max, max_steps and theta_iters must be positive.")


@dataclass(frozen=True)
class MarkOutcome:
    marked: np.ndarray
    k: int
    alpha: float
    layer_set: np.ndarray
    atomistic_set: np.ndarray
    theta: float = 0.0

    @property
    def continuum_set(self) -> np.ndarray:
        return np.setdiff1d(self.layer_set, self.atomistic_set)

    @property
    def atomistic_layers(self) -> int:
        return round_half_up(self.alpha * self.k)

    @property
    def blending_layers(self) -> int:
        return self.k - self.atomistic_layers


@dataclass(frozen=True, eq=False)
class AdaptState:
    step: int
    n_dof: int
    atomistic_radius: float
    blending_width: float
    domain_radius: float
    eta: float
    rho_tr: float
    eta_E: float
    mu_E: float
    n_marked: int
    k: int
    alpha: float
    enlarged: bool
    wall_time_ms: float
    mesh: CoupledMesh = field(repr=False)
    solution: Displacement = field(repr=False)
    report: EstimateReport = field(repr=False)


@dataclass
class AdaptResult:
    states: List[AdaptState]
    stopped_reason: str
    error: Optional[str] = None


def dorfler_mark(eta_local, fraction: float = DORFLER_FRACTION) -> np.ndarray:
    """
    Minimal set of elements carrying at least `fraction` of the total indicator,
    largest first, ties broken by element id.

    Returns:
        np.ndarray: Sorted element ids; empty when every contribution is zero.
    """
    values = np.asarray(eta_local, dtype=float)
    if values.size and values.min() < 0:
        raise ValueError("Local indicators must be nonnegative.")
    total = values.sum()
    if total <= 0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((np.arange(len(values)), -values))
    cumulative = np.cumsum(values[order])
    hits = cumulative >= fraction * total * (1 - 1e-12)
    count = int(np.argmax(hits)) + 1 if hits.any() else len(values)
    return np.sort(order[:count])


def element_distance(mesh: CoupledMesh) -> np.ndarray:
    """
    Distance from each element to the atomistic sites in nearest-neighbour units, rounded
    up; elements with an atomistic vertex are at distance 0.
    """
    model = mesh.model
    atomistic = np.flatnonzero((mesh.regions.labels == Region.atomistic) & model.in_domain)
    anchors = model.positions[atomistic] if len(atomistic) else model.core_points
    spacing = float(np.linalg.norm(model.stencil_vectors, axis=1).min())
    d, _ = cKDTree(anchors).query(mesh.centroids)
    dist = np.ceil(d / spacing - 1e-12).astype(int)
    is_atomistic_node = np.zeros(mesh.n_vertices, dtype=bool)
    on_site = mesh.node_site >= 0
    is_atomistic_node[on_site] = mesh.regions.labels[mesh.node_site[on_site]] == Region.atomistic
    dist[is_atomistic_node[mesh.elements].any(axis=1)] = 0
    return dist


def layer_select(
    marked: np.ndarray, values: np.ndarray, dist: np.ndarray, K: int, tau2: float, region: Optional[np.ndarray] = None
):
    """
    First k <= K whose marked blending and continuum elements within distance k carry
    tau2 of the whole marked mass. Marked atomistic elements count towards the mass only.

    Returns:
        tuple: (k, element ids); (0, empty) when no k qualifies.
    """
    marked = np.asarray(marked, dtype=int)
    total = values[marked].sum()
    if total <= 0:
        return 0, np.zeros(0, dtype=int)
    candidates = marked if region is None else marked[region[marked] != Region.atomistic]
    for k in range(1, K + 1):
        layer = candidates[dist[candidates] <= k]
        if values[layer].sum() >= tau2 * total:
            return k, layer
    return 0, np.zeros(0, dtype=int)


def split_ratio(
    layer_set, values: np.ndarray, dist: np.ndarray, region: np.ndarray, blending_width: float, theta_iters: int = 30
):
    """
    Splits the layer set into the part that feeds atomistic growth and the rest.

    theta is found by bisection so that blending elements within theta * L_b of the
    atomistic sites carry half of the blending mass. Blending elements of the layer set
    within theta * L_b go to the atomistic part; alpha is its share of the mass.

    Returns:
        tuple: (alpha, atomistic part, theta).
    """
    layer_set = np.asarray(layer_set, dtype=int)
    if len(layer_set) == 0:
        return 0.0, np.zeros(0, dtype=int), 0.0

    blending = np.flatnonzero(region == Region.blending)
    theta = 0.0
    if len(blending) and blending_width > 0 and values[blending].sum() > 0:
        lo, hi = 0.0, 1.0
        for _ in range(theta_iters):
            mid = 0.5 * (lo + hi)
            inner = dist[blending] <= mid * blending_width
            if values[blending[inner]].sum() < values[blending[~inner]].sum():
                lo = mid
            else:
                hi = mid
        theta = hi

    near = (region[layer_set] == Region.blending) & (dist[layer_set] <= theta * blending_width)
    atomistic_set = layer_set[near]
    mass = values[layer_set].sum()
    alpha = float(values[atomistic_set].sum() / mass) if mass > 0 else 0.0
    return min(max(alpha, 0.0), 1.0), atomistic_set, theta


def mark(mesh: CoupledMesh, values: np.ndarray, params: AdaptParams) -> MarkOutcome:
    """Dorfler selection, interface-layer detection and the atomistic/blending split."""
    marked = dorfler_mark(values)
    dist = element_distance(mesh)
    k, layer_set = layer_select(marked, values, dist, params.K, params.tau2, mesh.element_region)
    alpha, atomistic_set, theta = split_ratio(
        layer_set, values, dist, mesh.element_region, mesh.regions.blending_width, params.theta_iters
    )
    logger.info(f"Marked {len(marked)} elements: k={k}, alpha={alpha:.3f}, theta={theta:.3f}")
    return MarkOutcome(marked, k, alpha, layer_set, atomistic_set, theta)


def refine(mesh: CoupledMesh, outcome: MarkOutcome) -> CoupledMesh:
    """
    Expands the regions by round(alpha k) atomistic and k - round(alpha k) blending layers,
    then bisects the elements of the new mesh holding the barycenters of the surviving
    marked continuum elements.
    """
    model = mesh.model
    n_a, n_b = outcome.atomistic_layers, outcome.blending_layers
    new_mesh = expand_regions(mesh, model, n_a, n_b) if outcome.k > 0 else mesh

    surviving = outcome.marked[mesh.element_region[outcome.marked] == Region.continuum]
    if len(surviving):
        hosts, _ = new_mesh.locate(mesh.centroids[surviving])
        hosts = np.unique(hosts[hosts >= 0])
        hosts = hosts[new_mesh.element_region[hosts] == Region.continuum]
        dropped = len(surviving) - len(hosts)
        if dropped > 0:
            logger.debug(f"{dropped} marks absorbed into the lattice-resolution zone.")
        new_mesh = bisect(new_mesh, hosts)

    if new_mesh.n_dof <= mesh.n_dof:
        logger.warning("Refinement added no degrees of freedom; growing both regions by one layer.")
        new_mesh = expand_regions(new_mesh, model, 1, 1)
    return new_mesh


def adapt_loop(
    lattice_spec: LatticeSpec,
    method: MethodSpec,
    far_field: FarField,
    atomistic_radius: float,
    blending_width: float,
    params: AdaptParams = AdaptParams(),
    coarsening: float = 1.5,
    g_tol: float = G_TOL,
    max_iter: int = MAX_ITER,
    on_state: Optional[Callable[[AdaptState], None]] = None,
) -> AdaptResult:
    """
    Solve, estimate, mark and refine until the DoF cap, the estimator tolerance or the
    step limit is reached. The domain grows by a factor 1.5 whenever rho_tr > tau1 eta.

    Parameters:
        lattice_spec (LatticeSpec): Initial lattice and defect.
        method (MethodSpec): Coupling scheme and element order.
        far_field (FarField): Potential and loading.
        atomistic_radius (float): Initial R_a.
        blending_width (float): Initial L_b.
        params (AdaptParams): Loop parameters.
        coarsening (float): Continuum ring grading.
        g_tol (float): Solver tolerance.
        max_iter (int): Solver iteration cap.
        on_state (Callable, optional): Called with every recorded state.

    Returns:
        AdaptResult: The recorded states and the reason the loop stopped. Errors during a
            step end the loop and are returned with the states recorded so far.
    """
    if params.target is MarkTarget.energy and method.scheme is Scheme.bqcf:
        raise ValueError("Energy-based marking needs an energy-based scheme (BQCE or BGFC).")
    with_energy = method.scheme is not Scheme.bqcf

    model = build_lattice(lattice_spec)
    mesh = build_initial_mesh(model, atomistic_radius, blending_width, coarsening, method.fe_order)
    warm: Optional[Displacement] = None
    states: List[AdaptState] = []
    enlargements = 0

    for step in range(params.max_steps):
        started = time.perf_counter()
        try:
            solution = solve(method, mesh, far_field, warm_start=warm, g_tol=g_tol, max_iter=max_iter)
            report = estimate(mesh, far_field, solution.values, method.scheme, with_energy=with_energy)
        except Exception as e:
            logger.error(f"Adaptive step {step} failed: {e}")
            return AdaptResult(states, "error", str(e))

        enlarge = report.rho_tr > params.tau1 * report.eta and enlargements < params.max_enlargements
        stop = None
        if mesh.n_dof > params.N_max:
            stop = "dof_cap"
        elif report.eta < params.eta_tol:
            stop = "tolerance"

        outcome = None
        if stop is None and not enlarge:
            values = report.eta_E_local if params.target is MarkTarget.energy else report.eta_local
            outcome = mark(mesh, values, params)

        state = AdaptState(
            step=step,
            n_dof=mesh.n_dof,
            atomistic_radius=mesh.regions.atomistic_radius,
            blending_width=mesh.regions.blending_width,
            domain_radius=mesh.domain_radius,
            eta=report.eta,
            rho_tr=report.rho_tr,
            eta_E=report.eta_E,
            mu_E=report.mu_E,
            n_marked=0 if outcome is None else len(outcome.marked),
            k=0 if outcome is None else outcome.k,
            alpha=0.0 if outcome is None else outcome.alpha,
            enlarged=bool(enlarge and stop is None),
            wall_time_ms=1000.0 * (time.perf_counter() - started),
            mesh=mesh,
            solution=solution,
            report=report,
        )
        states.append(state)
        if on_state is not None:
            on_state(state)
        logger.info(
            f"Step {step}: DoF={mesh.n_dof}, R_a={state.atomistic_radius}, L_b={state.blending_width}, "
            f"R_Omega={state.domain_radius}, eta={report.eta:.4e}, rho_tr={report.rho_tr:.4e}"
        )
        if stop is not None:
            return AdaptResult(states, stop)

        try:
            new_mesh = None
            if not enlarge:
                try:
                    new_mesh = refine(mesh, outcome)
                except DomainTooSmallError as e:
                    logger.warning(f"{e}")
            if new_mesh is None:
                enlargements += 1
                radius = ENLARGE_FACTOR * mesh.domain_radius
                logger.info(f"Enlarging the domain to R_Omega={radius}")
                model = build_lattice(model.spec.with_radius(radius))
                new_mesh = enlarge_domain(mesh, model)
            warm = Displacement(transfer(mesh, solution.values, new_mesh), new_mesh, far_field.predictor)
            mesh = new_mesh
        except Exception as e:
            logger.error(f"Refinement after step {step} failed: {e}")
            return AdaptResult(states, "error", str(e))

    return AdaptResult(states, "max_steps")
