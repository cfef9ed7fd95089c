import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .lattice import TRIANGULAR_CELL, homogeneous_stencil

logger = logging.getLogger(__name__)

EQUILIBRIUM_SPACING = 0.9  # nearest-neighbour spacing that sets the reference density
STRETCH_BOUNDS = (0.9, 1.1)
STRETCH_XTOL = 1e-10
COLLAPSE_TOL = np.finfo(float).eps
STIFFNESS_STEP = 1e-4


class CollapsedBondError(ValueError):
    """Raised when a deformed bond has (numerically) zero length."""


def default_rho0(b: float) -> float:
    return float(6.0 * np.exp(-EQUILIBRIUM_SPACING * b))


@dataclass(frozen=True)
class EAMParams:
    a: float = 4.0
    b: float = 3.0
    C: float = 10.0
    rho0: Optional[float] = None

    def __post_init__(self):
        for name in ("a", "b", "C"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EAM parameter {name} must be positive, got {getattr(self, name)}.")
        if self.rho0 is None:
            object.__setattr__(self, "rho0", default_rho0(self.b))


@dataclass(frozen=True)
class Loading:
    """Far-field stretch S and shear gamma applied through the predictor."""

    stretch: float = 0.03
    shear: float = 0.03

    def predictor_gradient(self, t_star: float) -> np.ndarray:
        """
        Displacement gradient B - I of the far-field predictor, B = t* [[1, gamma], [0, 1 + S]].
        """
        B = t_star * np.array([[1.0, self.shear], [0.0, 1.0 + self.stretch]])
        return B - np.eye(2)


class EAMPotential:
    """
    Embedded-atom site potential

        V(y) = sum_rho phi(|y_rho|) + F(sum_rho psi(|y_rho|))

    with phi(r) = exp(-2a(r-1)) - 2 exp(-a(r-1)), psi(r) = exp(-b r) and
    F(t) = C [(t - rho0)^2 + (t - rho0)^4]. Methods work on flat bond lists:
    bonds[k] is a deformed bond vector owned by site owner[k].
    """

    def __init__(self, params: EAMParams):
        self.params = params

    def pair(self, r):
        a = self.params.a
        return np.exp(-2 * a * (r - 1)) - 2 * np.exp(-a * (r - 1))

    def pair_d(self, r):
        a = self.params.a
        return -2 * a * np.exp(-2 * a * (r - 1)) + 2 * a * np.exp(-a * (r - 1))

    def density(self, r):
        return np.exp(-self.params.b * r)

    def density_d(self, r):
        return -self.params.b * np.exp(-self.params.b * r)

    def embed(self, t):
        s = t - self.params.rho0
        return self.params.C * (s**2 + s**4)

    def embed_d(self, t):
        s = t - self.params.rho0
        return self.params.C * (2 * s + 4 * s**3)

    @staticmethod
    def lengths(bonds: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(bonds, axis=-1)
        if r.size and r.min() <= COLLAPSE_TOL:
            k = int(np.argmin(r))
            raise CollapsedBondError(f"Deformed bond {k} collapsed to length {r[k]:.3e}.")
        return r

    def site_energies(self, bonds: np.ndarray, owner: np.ndarray, n_sites: int) -> np.ndarray:
        """Raw (not renormalised) energy of every owning site."""
        r = self.lengths(bonds)
        pair_sum = np.bincount(owner, weights=self.pair(r), minlength=n_sites)
        rho = np.bincount(owner, weights=self.density(r), minlength=n_sites)
        return pair_sum + self.embed(rho)

    def bond_gradients(self, bonds: np.ndarray, owner: np.ndarray, n_sites: int) -> np.ndarray:
        """Partial derivative of the owning site energy with respect to each bond vector."""
        r = self.lengths(bonds)
        rho = np.bincount(owner, weights=self.density(r), minlength=n_sites)
        coeff = self.pair_d(r) + self.embed_d(rho)[owner] * self.density_d(r)
        return (coeff / r)[:, None] * bonds


def site_energy(params: EAMParams, Du: np.ndarray, rho_list: np.ndarray) -> float:
    """
    Renormalised EAM site energy V(Du) - V(0) of a single stencil.

    Parameters:
        params (EAMParams): Potential parameters.
        Du (np.ndarray): (m, 2) displacement differences, same order as rho_list.
        rho_list (np.ndarray): (m, 2) reference bond vectors.

    Returns:
        float: The site energy.

    Raises:
        CollapsedBondError: If a deformed bond has zero length.
    """
    rho_list = np.asarray(rho_list, dtype=float)
    Du = np.asarray(Du, dtype=float)
    if Du.shape != rho_list.shape:
        raise ValueError(f"Stencil shape {Du.shape} does not match bond list shape {rho_list.shape}.")
    potential = EAMPotential(params)
    owner = np.zeros(len(rho_list), dtype=int)
    deformed = potential.site_energies(rho_list + Du, owner, 1)[0]
    reference = potential.site_energies(rho_list, owner, 1)[0]
    return float(deformed - reference)


def site_gradient(params: EAMParams, Du: np.ndarray, rho_list: np.ndarray) -> np.ndarray:
    """
    Analytic partials dV/d(Du_rho) of the site energy, one 2-vector per bond.
    """
    rho_list = np.asarray(rho_list, dtype=float)
    Du = np.asarray(Du, dtype=float)
    if Du.shape != rho_list.shape:
        raise ValueError(f"Stencil shape {Du.shape} does not match bond list shape {rho_list.shape}.")
    owner = np.zeros(len(rho_list), dtype=int)
    return EAMPotential(params).bond_gradients(rho_list + Du, owner, 1)


class CauchyBorn:
    """
    Cauchy-Born energy density W(G) = det(A)^-1 V(G rho) over the homogeneous stencil,
    where G is the displacement gradient. Accepts a single (2, 2) gradient or a stack (n, 2, 2).
    """

    def __init__(self, params: EAMParams, cell=TRIANGULAR_CELL, cutoff: float = 2.0):
        cell = np.asarray(cell, dtype=float)
        self.params = params
        self.potential = EAMPotential(params)
        self.stencil = homogeneous_stencil(cell, cutoff)
        self.volume = float(np.linalg.det(cell))
        owner = np.zeros(len(self.stencil), dtype=int)
        self._reference = self.potential.site_energies(self.stencil, owner, 1)[0]

    def _bonds(self, G: np.ndarray):
        G = np.asarray(G, dtype=float)
        single = G.ndim == 2
        G = G.reshape(-1, 2, 2)
        n, m = len(G), len(self.stencil)
        bonds = self.stencil[None, :, :] + np.einsum("nij,mj->nmi", G, self.stencil)
        owner = np.repeat(np.arange(n), m)
        return bonds.reshape(-1, 2), owner, n, single

    def energy(self, G: np.ndarray):
        bonds, owner, n, single = self._bonds(G)
        W = (self.potential.site_energies(bonds, owner, n) - self._reference) / self.volume
        return float(W[0]) if single else W

    def stress(self, G: np.ndarray) -> np.ndarray:
        """First derivative dW/dG, entry (i, j) = sum_rho g_rho,i rho_j / det(A)."""
        bonds, owner, n, single = self._bonds(G)
        g = self.potential.bond_gradients(bonds, owner, n).reshape(n, -1, 2)
        sigma = np.einsum("nmi,mj->nij", g, self.stencil) / self.volume
        return sigma[0] if single else sigma

    def equilibrium_stretch(self) -> float:
        """
        Stretch t* minimising W((t - 1) I) on the bracket [0.9, 1.1].
        """
        result = minimize_scalar(
            lambda t: self.energy((t - 1.0) * np.eye(2)),
            bounds=STRETCH_BOUNDS,
            method="bounded",
            options={"xatol": STRETCH_XTOL},
        )
        logger.debug(f"Cauchy-Born equilibrium stretch t* = {result.x:.12f}")
        return float(result.x)

    def stiffness(self, G: np.ndarray, direction: np.ndarray, h: float = STIFFNESS_STEP) -> float:
        """Second directional derivative of W at G, by central differences."""
        G = np.asarray(G, dtype=float)
        direction = np.asarray(direction, dtype=float)
        return (self.energy(G + h * direction) - 2 * self.energy(G) + self.energy(G - h * direction)) / h**2


def cb_density(params: EAMParams, G: np.ndarray, cell=TRIANGULAR_CELL, cutoff: float = 2.0):
    """
    Cauchy-Born energy density of a displacement gradient on the homogeneous stencil.
    """
    return CauchyBorn(params, cell, cutoff).energy(G)


@dataclass(frozen=True)
class SecondOrderForms:
    """V'' and W'': site energy and density minus their linearisation at zero."""

    site: Callable[[np.ndarray], float]
    density: Callable[[np.ndarray], float]
    site_gradient0: np.ndarray = field(repr=False)
    stress0: np.ndarray = field(repr=False)


def renormalize_second(params: EAMParams, rho_list=None, cell=TRIANGULAR_CELL, cutoff: float = 2.0) -> SecondOrderForms:
    """
    Builds the evaluators V''(Du) = V(Du) - <dV(0), Du> and W''(G) = W(G) - <dW(0), G>.

    Parameters:
        params (EAMParams): Potential parameters.
        rho_list (np.ndarray, optional): Stencil for V''. Defaults to the homogeneous stencil.
        cell: Lattice cell matrix.
        cutoff (float): Interaction radius.

    Returns:
        SecondOrderForms: The two evaluators and the linearisation data.
    """
    cb = CauchyBorn(params, cell, cutoff)
    rho = cb.stencil if rho_list is None else np.asarray(rho_list, dtype=float)
    g0 = site_gradient(params, np.zeros_like(rho), rho)
    sigma0 = cb.stress(np.zeros((2, 2)))

    def site(Du):
        Du = np.asarray(Du, dtype=float)
        return site_energy(params, Du, rho) - float(np.sum(g0 * Du))

    def density(G):
        G = np.asarray(G, dtype=float)
        return cb.energy(G) - float(np.sum(sigma0 * G))

    return SecondOrderForms(site=site, density=density, site_gradient0=g0, stress0=sigma0)
