import csv
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, List, Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import NoConvergence, line_search, newton_krylov
from scipy.sparse.linalg import LinearOperator, splu

from .femesh import CoupledMesh
from .lattice import TRIANGULAR_CELL, LatticeModel, StencilError, build_lattice
from .potential import CauchyBorn, CollapsedBondError, EAMParams, EAMPotential, Loading

logger = logging.getLogger(__name__)

G_TOL = 1e-7  # max-norm of the gradient or residual at convergence
MAX_ITER = 2000
MAX_NEWTON = 200
WOLFE_C1 = 1e-4
WOLFE_C2 = 0.1
SECANT_ITERS = 25


class SolverError(RuntimeError):
    """Raised when a coupled problem cannot be solved to tolerance."""


class StaleCorrectionError(RuntimeError):
    """Raised when a ghost-force correction is used with a mesh it was not built for."""


class Scheme(str, Enum):
    bqce = "bqce"
    bqcf = "bqcf"
    bgfc = "bgfc"

    @classmethod
    def _missing_(cls, value):
        """
        Makes the enum case-insensitive.
        """
        if isinstance(value, str):
            for member in cls:
                if member.value == value.lower():
                    return member
        return None


@dataclass(frozen=True)
class MethodSpec:
    scheme: Scheme
    fe_order: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.fe_order not in (1, 2):
            raise ValueError(f"Finite element order must be 1 or 2, got {self.fe_order}.")
        if self.scheme is Scheme.bqce and self.fe_order != 1:
            raise ValueError("BQCE is only defined with P1 elements.")

    @property
    def name(self) -> str:
        if self.scheme is Scheme.bqce:
            return "bqce"
        return f"{self.scheme.value}{self.fe_order}"

    @classmethod
    def from_name(cls, name: str) -> "MethodSpec":
        """Parses bqce, bqcf1, bqcf2, bgfc1 or bgfc2."""
        name = name.strip().lower()
        if name == "bqce":
            return cls(Scheme.bqce, 1)
        if len(name) == 5 and name[-1] in "12":
            return cls(Scheme(name[:4]), int(name[-1]))
        raise ValueError(f"Unknown method '{name}'. Expected bqce, bqcf1, bqcf2, bgfc1 or bgfc2.")


@dataclass(frozen=True, eq=False)
class FarField:
    """Potential, Cauchy-Born density and the far-field predictor gradient B - I."""

    params: EAMParams = field(default_factory=EAMParams)
    loading: Loading = field(default_factory=Loading)
    cell: tuple = TRIANGULAR_CELL
    cutoff: float = 2.0

    @classmethod
    def for_model(cls, model: LatticeModel, params: Optional[EAMParams] = None, loading: Optional[Loading] = None):
        return cls(params or EAMParams(), loading or Loading(), model.spec.cell, model.spec.cutoff)

    @cached_property
    def potential(self) -> EAMPotential:
        return EAMPotential(self.params)

    @cached_property
    def cb(self) -> CauchyBorn:
        return CauchyBorn(self.params, self.cell, self.cutoff)

    @cached_property
    def t_star(self) -> float:
        return self.cb.equilibrium_stretch()

    @cached_property
    def predictor(self) -> np.ndarray:
        return self.loading.predictor_gradient(self.t_star)


@dataclass
class Displacement:
    """FE coefficients (n_dof, 2) relative to the far-field predictor."""

    values: np.ndarray
    mesh: CoupledMesh
    predictor: np.ndarray
    iterations: int = 0
    residual: float = float("nan")
    energy: float = float("nan")

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_dof, 2):
            raise ValueError(f"Expected coefficients of shape {(self.mesh.n_dof, 2)}, got {self.values.shape}.")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Displacement coefficients must be finite.")

    @property
    def lattice(self) -> np.ndarray:
        """Lattice interpolant I_a u_h at every site of the mesh's lattice."""
        return self.mesh.interpolation @ self.values


def _scatter(n: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.column_stack([np.bincount(index, weights=values[:, k], minlength=n) for k in range(2)])


class AtomisticBlock:
    """
    Weighted sum of site energy differences sum_l w_l [V_l(Du_B + Du) - V_l(Du_B)] over
    the owner sites, evaluated on a local site field u_local indexed by local_sites.
    """

    def __init__(self, model: LatticeModel, potential: EAMPotential, owners, weights, predictor: np.ndarray):
        owners = np.asarray(owners, dtype=int)
        if len(owners) and not model.complete[owners].all():
            bad = owners[~model.complete[owners]][0]
            raise StencilError(f"Stencil of site {bad} leaves the lattice without ghost data.")
        self.potential = potential
        self.owners = owners
        self.weights = np.asarray(weights, dtype=float)
        bonds = model.bonds_of(owners)
        counts = model.bond_ptr[owners + 1] - model.bond_ptr[owners]
        self.slot = np.repeat(np.arange(len(owners)), counts)
        self.local_sites = np.unique(np.concatenate([owners, model.bond_nbr[bonds]]))
        self.own = np.searchsorted(self.local_sites, model.bond_site[bonds])
        self.nbr = np.searchsorted(self.local_sites, model.bond_nbr[bonds])
        self.owner_local = np.searchsorted(self.local_sites, owners)
        rho = model.bond_vec[bonds]
        self.base = rho + rho @ predictor.T
        self.reference = potential.site_energies(self.base, self.slot, len(owners))

    @cached_property
    def base_gradients(self) -> np.ndarray:
        return self.potential.bond_gradients(self.base, self.slot, len(self.owners))

    def _deformed(self, u_local: np.ndarray) -> np.ndarray:
        return self.base + u_local[self.nbr] - u_local[self.own]

    def site_energies(self, u_local: np.ndarray) -> np.ndarray:
        return self.potential.site_energies(self._deformed(u_local), self.slot, len(self.owners)) - self.reference

    def energy(self, u_local: np.ndarray) -> float:
        if len(self.owners) == 0:
            return 0.0
        return float(np.dot(self.weights, self.site_energies(u_local)))

    def _reduce(self, bond_values: np.ndarray) -> np.ndarray:
        n = len(self.local_sites)
        return _scatter(n, self.nbr, bond_values) - _scatter(n, self.own, bond_values)

    def gradient(self, u_local: np.ndarray) -> np.ndarray:
        """Gradient of the weighted energy with respect to u_local."""
        if len(self.owners) == 0:
            return np.zeros((len(self.local_sites), 2))
        g = self.potential.bond_gradients(self._deformed(u_local), self.slot, len(self.owners))
        return self._reduce(self.weights[self.slot][:, None] * g)

    def linearized_site_energies(self, u_local: np.ndarray) -> np.ndarray:
        """Per-owner energies minus their linearisation at the predictor."""
        du = u_local[self.nbr] - u_local[self.own]
        linear = np.bincount(self.slot, weights=np.sum(self.base_gradients * du, axis=1), minlength=len(self.owners))
        return self.site_energies(u_local) - linear

    def linearized_energy(self, u_local: np.ndarray) -> float:
        if len(self.owners) == 0:
            return 0.0
        return float(np.dot(self.weights, self.linearized_site_energies(u_local)))


class ContinuumBlock:
    """Quadrature sum sum_q s_q [W(G_B + grad u(x_q)) - W(G_B)] over points with s_q > 0."""

    def __init__(self, mesh: CoupledMesh, cb: CauchyBorn, predictor: np.ndarray, scale: np.ndarray):
        quadrature = mesh.quadrature
        keep = np.flatnonzero(scale > 0)
        self.cb = cb
        self.predictor = predictor
        self.Dx = quadrature.Dx[keep]
        self.Dy = quadrature.Dy[keep]
        self.scale = scale[keep]
        self.element = quadrature.element[keep]
        self.n_dof = mesh.n_dof
        self.reference = cb.energy(predictor)
        self.stress0 = cb.stress(predictor)

    def displacement_gradients(self, U: np.ndarray) -> np.ndarray:
        G = np.empty((len(self.scale), 2, 2))
        G[:, :, 0] = self.Dx @ U
        G[:, :, 1] = self.Dy @ U
        return G

    def energy(self, U: np.ndarray) -> float:
        if len(self.scale) == 0:
            return 0.0
        W = self.cb.energy(self.predictor + self.displacement_gradients(U))
        return float(np.dot(self.scale, W - self.reference))

    def gradient(self, U: np.ndarray) -> np.ndarray:
        if len(self.scale) == 0:
            return np.zeros((self.n_dof, 2))
        sigma = self.cb.stress(self.predictor + self.displacement_gradients(U))
        return self.Dx.T @ (self.scale[:, None] * sigma[:, :, 0]) + self.Dy.T @ (self.scale[:, None] * sigma[:, :, 1])

    def point_energies(self, U: np.ndarray, linearized: bool = False) -> np.ndarray:
        """Unweighted W(G_B + grad u) - W(G_B) per kept point, optionally minus its linear part."""
        if len(self.scale) == 0:
            return np.zeros(0)
        G = self.displacement_gradients(U)
        values = self.cb.energy(self.predictor + G) - self.reference
        if linearized:
            values = values - np.einsum("ij,nij->n", self.stress0, G)
        return values

    def linearized_energy(self, U: np.ndarray) -> float:
        if len(self.scale) == 0:
            return 0.0
        return float(np.dot(self.scale, self.point_energies(U, linearized=True)))


class BlendedProblem:
    """
    Blended coupling on one mesh. Displacements are (n_dof, 2) arrays relative to the
    predictor; the atomistic sum runs over sites with 1 - beta > 0 and the Cauchy-Born
    quadrature over points with beta > 0.
    """

    def __init__(self, mesh: CoupledMesh, far_field: FarField):
        self.mesh = mesh
        self.far_field = far_field
        model = mesh.model
        beta = mesh.blend.site_values
        weights = np.where(model.in_domain, 1.0 - beta, 0.0)
        owners = np.flatnonzero(weights > 0)
        self.atomistic = AtomisticBlock(model, far_field.potential, owners, weights[owners], far_field.predictor)
        self.P_local = mesh.interpolation[self.atomistic.local_sites]
        quadrature = mesh.quadrature
        self.continuum = ContinuumBlock(mesh, far_field.cb, far_field.predictor, quadrature.weights * quadrature.beta)
        logger.debug(
            f"Blended problem: {len(owners)} weighted sites, {len(self.continuum.scale)} weighted quadrature points."
        )

    @cached_property
    def _force_blocks(self):
        model = self.mesh.model
        active = self.atomistic.owners
        ring = np.unique(np.concatenate([active, model.bond_nbr[model.bonds_of(active)]]))
        block = AtomisticBlock(model, self.far_field.potential, ring, np.ones(len(ring)), self.far_field.predictor)
        P_ring = self.mesh.interpolation[block.local_sites]
        active_local = np.searchsorted(block.local_sites, active)
        element_touch = self.mesh.node_beta[self.mesh.elements].max(axis=1) > 0
        quadrature = self.mesh.quadrature
        scale = quadrature.weights * element_touch[quadrature.element]
        continuum = ContinuumBlock(self.mesh, self.far_field.cb, self.far_field.predictor, scale)
        return block, P_ring, active_local, continuum

    def bqce_energy(self, U: np.ndarray) -> float:
        u_local = self.P_local @ U
        return self.atomistic.energy(u_local) + self.continuum.energy(U)

    def bqce_gradient(self, U: np.ndarray) -> np.ndarray:
        u_local = self.P_local @ U
        return self.P_local.T @ self.atomistic.gradient(u_local) + self.continuum.gradient(U)

    def bqcf_residual(self, U: np.ndarray) -> np.ndarray:
        """
        Assembled BQCF residual: atomistic forces tested with (1 - beta) v on the lattice plus
        Cauchy-Born forces tested with the nodewise product beta v.
        """
        block, P_ring, active_local, continuum = self._force_blocks
        forces = block.gradient(P_ring @ U)
        weighted = (1.0 - self.mesh.blend.site_values[self.atomistic.owners])[:, None] * forces[active_local]
        P_active = self.mesh.interpolation[self.atomistic.owners]
        return P_active.T @ weighted + self.mesh.dofs.beta[:, None] * continuum.gradient(U)

    def bqcf_force(self, U: np.ndarray, V: np.ndarray) -> float:
        return float(np.sum(self.bqcf_residual(U) * V))

    def bgfc_energy_renormalized(self, U: np.ndarray) -> float:
        """BGFC energy with V'' and W'' linearised at the predictor."""
        u_local = self.P_local @ U
        return self.atomistic.linearized_energy(u_local) + self.continuum.linearized_energy(U)

    @cached_property
    def preconditioner(self) -> Callable[[np.ndarray], np.ndarray]:
        """
        Sparse LU of the P1-type stiffness c (Dx^T W Dx + Dy^T W Dy), c the Cauchy-Born
        stiffness along a uniaxial stretch at the predictor.
        """
        cb = self.far_field.cb
        c = cb.stiffness(self.far_field.predictor, np.array([[1.0, 0.0], [0.0, 0.0]]))
        if not np.isfinite(c) or c <= 0:
            logger.warning(f"Non-positive Cauchy-Born stiffness {c}; using a unit Laplacian preconditioner.")
            c = 1.0
        quadrature = self.mesh.quadrature
        W = sp.diags(quadrature.weights)
        K = c * (quadrature.Dx.T @ W @ quadrature.Dx + quadrature.Dy.T @ W @ quadrature.Dy)
        lu = splu(sp.csc_matrix(K))
        return lambda G: lu.solve(np.asarray(G, dtype=float))


@dataclass(frozen=True)
class GhostForceCorrection:
    """Gradient of the BQCE energy of the perfect lattice at zero, for one mesh."""

    vector: np.ndarray
    fingerprint: str

    @classmethod
    def compute(cls, mesh: CoupledMesh, far_field: FarField) -> "GhostForceCorrection":
        model = mesh.model
        if model.added.any() or len(model.removed):
            homogeneous = build_lattice(model.spec.homogeneous())
        else:
            homogeneous = model

        beta = np.zeros(homogeneous.n_sites)
        source = np.full(homogeneous.n_sites, -1)
        for i in range(homogeneous.n_sites):
            j = model.index_lookup.get((int(homogeneous.index[i, 0]), int(homogeneous.index[i, 1])))
            if j is not None:
                source[i] = j
                beta[i] = mesh.blend.site_values[j]
        weights = np.where(homogeneous.in_domain, 1.0 - beta, 0.0)
        owners = np.flatnonzero(weights > 0)
        block = AtomisticBlock(homogeneous, far_field.potential, owners, weights[owners], far_field.predictor)

        local = block.local_sites
        mapped = source[local] >= 0
        rows = []
        if mapped.any():
            rows.append((np.flatnonzero(mapped), mesh.interpolation[source[local[mapped]]]))
        if (~mapped).any():
            rows.append((np.flatnonzero(~mapped), mesh.evaluation_matrix(homogeneous.positions[local[~mapped]])))
        order = np.concatenate([idx for idx, _ in rows])
        stacked = sp.vstack([block_rows for _, block_rows in rows]).tocsr()
        position = np.empty_like(order)
        position[order] = np.arange(len(order))
        P_local = stacked[position]

        quadrature = mesh.quadrature
        continuum = ContinuumBlock(mesh, far_field.cb, far_field.predictor, quadrature.weights * quadrature.beta)
        zero = np.zeros((mesh.n_dof, 2))
        vector = P_local.T @ block.gradient(np.zeros((len(local), 2))) + continuum.gradient(zero)
        logger.info(f"Ghost-force correction computed, max-norm {np.abs(vector).max() if vector.size else 0:.3e}")
        return cls(np.asarray(vector), mesh.fingerprint)

    def check(self, mesh: CoupledMesh) -> None:
        if mesh.fingerprint != self.fingerprint:
            raise StaleCorrectionError("Ghost-force correction was computed for a different mesh.")


def bgfc_energy(problem: BlendedProblem, correction: GhostForceCorrection, U: np.ndarray) -> float:
    correction.check(problem.mesh)
    return problem.bqce_energy(U) - float(np.sum(correction.vector * U))


def bgfc_gradient(problem: BlendedProblem, correction: GhostForceCorrection, U: np.ndarray) -> np.ndarray:
    correction.check(problem.mesh)
    return problem.bqce_gradient(U) - correction.vector


class SolverTrace:
    """Collects (iteration, energy, residual) rows and writes them as CSV."""

    def __init__(self, path=None):
        self.path = path
        self.rows: List[tuple] = []

    def record(self, iteration: int, energy: float, residual: float) -> None:
        self.rows.append((iteration, energy, residual))
        logger.debug(f"iteration {iteration}: energy {energy:.12e}, residual {residual:.3e}")

    def write(self, path=None) -> None:
        path = path or self.path
        if path is None:
            return
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["iteration", "energy", "residual"])
            writer.writerows(self.rows)


def _safe(fun):
    def wrapped(x):
        try:
            return fun(x)
        except CollapsedBondError:
            return np.inf
    return wrapped


def _secant_search(grad, x, d, gx):
    """
    Step along d where the directional derivative nearly vanishes, using derivatives only.
    Returns (alpha, gradient) or (None, None).
    """
    dphi0 = float(gx @ d)
    a_prev, dphi_prev = 0.0, dphi0
    a = 1.0
    best = (None, None, abs(dphi0))
    for _ in range(SECANT_ITERS):
        try:
            ga = grad(x + a * d)
        except CollapsedBondError:
            a *= 0.5
            continue
        dphi = float(ga @ d)
        if abs(dphi) < best[2]:
            best = (a, ga, abs(dphi))
        if abs(dphi) <= WOLFE_C2 * abs(dphi0):
            return a, ga
        denom = dphi - dphi_prev
        a_new = a - dphi * (a - a_prev) / denom if denom != 0 else 2 * a
        if not np.isfinite(a_new) or a_new <= 0:
            a_new = 2 * a if dphi < 0 else 0.5 * a
        a_prev, dphi_prev, a = a, dphi, a_new
    return best[0], best[1]


def minimize_ncg(energy, gradient, precon, x0: np.ndarray, g_tol: float = G_TOL, max_iter: int = MAX_ITER, trace=None):
    """
    Preconditioned Polak-Ribiere nonlinear conjugate gradients with a strong-Wolfe line
    search, restarting along the preconditioned gradient when the search fails.

    Returns:
        tuple: (solution, iterations, final max-norm of the gradient, final energy).

    Raises:
        SolverError: On line-search failure or when the iteration cap is reached.
    """
    shape = x0.shape
    f = _safe(lambda x: energy(x.reshape(shape)))
    g = lambda x: np.asarray(gradient(x.reshape(shape))).ravel()
    M = lambda v: np.asarray(precon(v.reshape(shape))).ravel()

    x = x0.ravel().astype(float).copy()
    fx, gx = f(x), g(x)
    s = M(gx)
    d = -s
    res = float(np.abs(gx).max()) if gx.size else 0.0
    for it in range(max_iter):
        res = float(np.abs(gx).max()) if gx.size else 0.0
        if trace is not None:
            trace.record(it, fx, res)
        if res <= g_tol:
            return x.reshape(shape), it, res, fx

        alpha, g_new = None, None
        for direction in (d, -s):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out = line_search(f, g, x, direction, gfk=gx, old_fval=fx, c1=WOLFE_C1, c2=WOLFE_C2)
            alpha, g_new = out[0], out[5]
            if alpha is None:
                alpha, g_new = _secant_search(g, x, direction, gx)
            if alpha is not None:
                d = direction
                break
            logger.warning(f"Line search failed at iteration {it}; restarting along the preconditioned gradient.")
        if alpha is None:
            logger.error(f"Line search failed at iteration {it}, residual {res:.3e}")
            raise SolverError(f"Line search failed at iteration {it} with residual {res:.3e}.")

        x = x + alpha * d
        if g_new is None:
            g_new = g(x)
        fx = f(x)
        s_new = M(g_new)
        beta = max(0.0, float(g_new @ (s_new - s)) / float(gx @ s))
        d = -s_new + beta * d
        if float(d @ g_new) >= 0:
            d = -s_new
        gx, s = g_new, s_new

    logger.error(f"NCG reached {max_iter} iterations with residual {res:.3e}")
    raise SolverError(f"Iteration cap {max_iter} exceeded; final residual {res:.3e}.")


def solve_residual(residual, precon, x0: np.ndarray, g_tol: float = G_TOL, max_iter: int = MAX_NEWTON, trace=None):
    """
    Preconditioned Newton-Krylov solve of a nonlinear residual equation.

    Returns:
        tuple: (solution, iterations, final max-norm of the residual).
    """
    shape = x0.shape
    F = lambda x: np.asarray(residual(x.reshape(shape))).ravel()
    r0 = F(x0.ravel())
    res = float(np.abs(r0).max()) if r0.size else 0.0
    if trace is not None:
        trace.record(0, float("nan"), res)
    if res <= g_tol:
        return x0, 0, res

    n = x0.size
    M = LinearOperator((n, n), matvec=lambda v: np.asarray(precon(v.reshape(shape))).ravel())
    count = {"it": 0}

    def callback(x, fx):
        count["it"] += 1
        if trace is not None:
            trace.record(count["it"], float("nan"), float(np.abs(fx).max()))

    try:
        x = newton_krylov(
            F, x0.ravel(), f_tol=g_tol, inner_M=M, maxiter=max_iter, method="lgmres", callback=callback
        )
    except NoConvergence as e:
        last = np.asarray(e.args[0]) if e.args else x0.ravel()
        final = float(np.abs(F(last)).max())
        logger.error(f"Newton-Krylov did not converge: residual {final:.3e}")
        raise SolverError(f"Residual solve did not converge after {max_iter} iterations; residual {final:.3e}.") from e
    final = float(np.abs(F(x)).max())
    if final > g_tol:
        raise SolverError(f"Residual solve stopped with residual {final:.3e} above {g_tol:.1e}.")
    return x.reshape(shape), count["it"], final


def solve(
    method: MethodSpec,
    mesh: CoupledMesh,
    far_field: FarField,
    warm_start: Optional[Displacement] = None,
    g_tol: float = G_TOL,
    max_iter: int = MAX_ITER,
    trace: Optional[SolverTrace] = None,
    correction: Optional[GhostForceCorrection] = None,
) -> Displacement:
    """
    Solves one coupled problem.

    Parameters:
        method (MethodSpec): Scheme and finite element order.
        mesh (CoupledMesh): The mesh; its order must match the method.
        far_field (FarField): Potential and loading.
        warm_start (Displacement, optional): Initial guess on the same mesh.
        g_tol (float): Max-norm tolerance on the gradient or residual.
        max_iter (int): Iteration cap.
        trace (SolverTrace, optional): Receives one row per iteration.
        correction (GhostForceCorrection, optional): Precomputed BGFC correction.

    Returns:
        Displacement: The converged coefficients with iteration count and residual.

    Raises:
        ValueError: If the method and mesh disagree or the warm start has the wrong shape.
        SolverError: If the iteration does not converge.
    """
    if mesh.fe_order != method.fe_order:
        raise ValueError(f"Method {method.name} needs P{method.fe_order} elements, mesh has P{mesh.fe_order}.")
    problem = BlendedProblem(mesh, far_field)
    U0 = np.zeros((mesh.n_dof, 2)) if warm_start is None else np.asarray(warm_start.values, dtype=float)
    if U0.shape != (mesh.n_dof, 2):
        raise ValueError(f"Warm start has shape {U0.shape}, mesh needs {(mesh.n_dof, 2)}.")

    energy = float("nan")
    if method.scheme is Scheme.bqcf:
        U, iterations, residual = solve_residual(
            problem.bqcf_residual, problem.preconditioner, U0, g_tol, min(max_iter, MAX_NEWTON), trace
        )
    else:
        if method.scheme is Scheme.bgfc:
            correction = correction or GhostForceCorrection.compute(mesh, far_field)
            correction.check(mesh)
            fun = lambda U: bgfc_energy(problem, correction, U)
            jac = lambda U: bgfc_gradient(problem, correction, U)
        else:
            fun, jac = problem.bqce_energy, problem.bqce_gradient
        U, iterations, residual, energy = minimize_ncg(fun, jac, problem.preconditioner, U0, g_tol, max_iter, trace)

    if trace is not None:
        trace.write()
    logger.info(f"{method.name} solved on {mesh.n_dof} DoF in {iterations} iterations, residual {residual:.3e}")
    return Displacement(U, mesh, far_field.predictor, iterations, residual, energy)
