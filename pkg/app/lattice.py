import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Tuple

import numpy as np
from scipy.spatial import Delaunay, cKDTree

logger = logging.getLogger(__name__)

SQRT3_2 = np.sqrt(3.0) / 2.0
TRIANGULAR_CELL = ((1.0, 0.5), (0.0, SQRT3_2))  # columns are the lattice vectors
INTERSTITIAL_POSITION = (1.5, 0.0)
VACANCY_INDEX = (0, 0)
BOND_TOL = 1e-9  # slack on the cutoff sphere
AREA_TOL = 1e-12  # triangles below this area are dropped from Delaunay output


class LatticeError(ValueError):
    """Raised for an invalid lattice or defect specification."""


class StencilError(ValueError):
    """Raised when a finite-difference stencil cannot be formed."""


class DefectKind(str, Enum):
    none = "none"
    microcrack = "microcrack"
    frenkel = "frenkel"

    @classmethod
    def _missing_(cls, value):
        """
        Makes the enum case-insensitive.
        """
        if isinstance(value, str):
            value_lower = value.lower()
            for member in cls:
                if member.value == value_lower:
                    return member
        return None


@dataclass(frozen=True)
class DefectSpec:
    kind: DefectKind = DefectKind.none
    count: int = 6

    def __post_init__(self):
        object.__setattr__(self, "kind", DefectKind(self.kind))
        if self.kind is DefectKind.microcrack and self.count < 1:
            raise LatticeError(f"Micro-crack needs at least one removed site, got count={self.count}.")


@dataclass(frozen=True)
class LatticeSpec:
    domain_radius: float
    cutoff: float = 2.0
    defect: DefectSpec = field(default_factory=DefectSpec)
    cell: Tuple[Tuple[float, float], Tuple[float, float]] = TRIANGULAR_CELL

    def __post_init__(self):
        if np.linalg.det(self.cell_matrix) <= 0:
            raise LatticeError("Cell matrix must have a positive determinant.")
        if self.cutoff < 1:
            raise LatticeError(f"Cutoff must be at least 1 (nearest neighbours), got {self.cutoff}.")
        if self.domain_radius <= self.cutoff:
            raise LatticeError(
                f"Domain radius {self.domain_radius} must exceed the cutoff {self.cutoff}."
            )

    @property
    def cell_matrix(self) -> np.ndarray:
        return np.array(self.cell, dtype=float)

    @property
    def halo(self) -> float:
        # Two interaction ranges: neighbours of boundary sites need complete densities too.
        return 2.0 * self.cutoff

    def with_radius(self, domain_radius: float) -> "LatticeSpec":
        return LatticeSpec(domain_radius, self.cutoff, self.defect, self.cell)

    def homogeneous(self) -> "LatticeSpec":
        return LatticeSpec(self.domain_radius, self.cutoff, DefectSpec(), self.cell)


def homogeneous_stencil(cell: np.ndarray, cutoff: float) -> np.ndarray:
    """
    Enumerates the bond vectors of the perfect lattice within the cutoff.

    Parameters:
        cell (np.ndarray): 2x2 cell matrix A, lattice points are A z.
        cutoff (float): Interaction radius.

    Returns:
        np.ndarray: (m, 2) bond vectors ordered by (z2, z1), the same order interior sites use.
    """
    z = _index_box(cell, cutoff)
    points = z @ np.asarray(cell).T
    lengths = np.linalg.norm(points, axis=1)
    keep = (lengths > BOND_TOL) & (lengths <= cutoff + BOND_TOL)
    return points[keep]


def _index_box(cell: np.ndarray, radius: float) -> np.ndarray:
    smallest = np.linalg.svd(np.asarray(cell), compute_uv=False).min()
    m = int(np.ceil(radius / smallest)) + 1
    z1, z2 = np.meshgrid(np.arange(-m, m + 1), np.arange(-m, m + 1), indexing="xy")
    z1, z2 = z1.ravel(), z2.ravel()
    order = np.lexsort((z1, z2))
    return np.column_stack([z1[order], z2[order]])


@dataclass(frozen=True, eq=False)
class LatticeModel:
    """
    Defected lattice with neighbour bonds and the triangulation of the domain sites.

    Bonds are stored flat and directed, sorted by owning site and then by neighbour:
    bond b goes from bond_site[b] to bond_nbr[b] with reference vector bond_vec[b].
    """

    spec: LatticeSpec
    positions: np.ndarray
    index: np.ndarray
    added: np.ndarray
    removed: np.ndarray
    bond_site: np.ndarray
    bond_nbr: np.ndarray
    bond_vec: np.ndarray
    bond_ptr: np.ndarray
    triangles: np.ndarray

    @property
    def n_sites(self) -> int:
        return len(self.positions)

    @property
    def domain_radius(self) -> float:
        return self.spec.domain_radius

    @cached_property
    def radii(self) -> np.ndarray:
        return np.linalg.norm(self.positions, axis=1)

    @cached_property
    def in_domain(self) -> np.ndarray:
        return self.radii <= self.domain_radius + BOND_TOL

    @cached_property
    def complete(self) -> np.ndarray:
        """Sites whose whole stencil lies inside the stored lattice."""
        return self.radii <= self.domain_radius + self.spec.cutoff + BOND_TOL

    @property
    def site_region(self) -> np.ndarray:
        return np.where(self.in_domain, "domain", "halo")

    @cached_property
    def core_points(self) -> np.ndarray:
        """Positions of the defect core, the origin for the perfect lattice."""
        points = np.vstack([self.removed, self.positions[self.added]])
        if len(points) == 0:
            return np.zeros((1, 2))
        return points

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        return triangle_areas(self.positions, self.triangles)

    @cached_property
    def boundary_sites(self) -> np.ndarray:
        """Vertices of the domain triangulation lying on its boundary edges."""
        edges = np.sort(self.triangles[:, [1, 2, 2, 0, 0, 1]].reshape(-1, 2), axis=1)
        unique, counts = np.unique(edges, axis=0, return_counts=True)
        return np.unique(unique[counts == 1])

    @cached_property
    def stencil_vectors(self) -> np.ndarray:
        return homogeneous_stencil(self.spec.cell_matrix, self.spec.cutoff)

    @cached_property
    def index_lookup(self) -> dict:
        """Maps a lattice index (z1, z2) to the site number, for non-added sites."""
        lookup = {}
        for i in np.flatnonzero(~self.added):
            lookup[(int(self.index[i, 0]), int(self.index[i, 1]))] = int(i)
        return lookup

    def neighbors(self, site: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns the neighbour indices and bond vectors of one site, in stencil order.
        """
        lo, hi = self.bond_ptr[site], self.bond_ptr[site + 1]
        return self.bond_nbr[lo:hi], self.bond_vec[lo:hi]

    def bonds_of(self, sites: np.ndarray) -> np.ndarray:
        """Indices of the bonds owned by the given sites."""
        sites = np.asarray(sites, dtype=int)
        if len(sites) == 0:
            return np.zeros(0, dtype=int)
        counts = self.bond_ptr[sites + 1] - self.bond_ptr[sites]
        starts = np.repeat(self.bond_ptr[sites], counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        return starts + offsets


def triangle_areas(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = points[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def delaunay_triangles(points: np.ndarray) -> np.ndarray:
    """
    Delaunay triangulation with counter-clockwise triangles and zero-area ones removed.
    """
    simplices = Delaunay(points).simplices.astype(int)
    areas = triangle_areas(points, simplices)
    flip = areas < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]
    keep = np.abs(areas) > AREA_TOL
    return simplices[keep]


def _apply_defect(spec: LatticeSpec, index: np.ndarray, positions: np.ndarray):
    defect = spec.defect
    removed_mask = np.zeros(len(index), dtype=bool)
    extra = np.zeros((0, 2))
    radius = spec.domain_radius
    lookup = {(int(z[0]), int(z[1])): i for i, z in enumerate(index)}

    if defect.kind is DefectKind.microcrack:
        k = defect.count
        row = range(-((k - 1) // 2), (k - 1) - (k - 1) // 2 + 1)
        for j in row:
            i = lookup.get((j, 0))
            if i is None or np.linalg.norm(positions[i]) > radius:
                raise LatticeError(
                    f"Micro-crack of {k} sites does not fit in the row of a domain with radius {radius}."
                )
            removed_mask[i] = True
    elif defect.kind is DefectKind.frenkel:
        interstitial = np.array(INTERSTITIAL_POSITION)
        if np.linalg.norm(interstitial) > radius:
            raise LatticeError(f"Interstitial at {tuple(interstitial)} lies outside the domain.")
        removed_mask[lookup[VACANCY_INDEX]] = True
        extra = interstitial[None, :]

    return removed_mask, extra


def build_lattice(spec: LatticeSpec) -> LatticeModel:
    """
    Builds the defected lattice of a disc-shaped domain plus its ghost halo.

    Parameters:
        spec (LatticeSpec): Cell, domain radius, cutoff and defect.

    Returns:
        LatticeModel: Sites ordered by (z2, z1) with added sites last, bond lists and
            the triangulation of the sites inside the domain.

    Raises:
        LatticeError: If the defect does not fit inside the domain.
    """
    cell = spec.cell_matrix
    outer = spec.domain_radius + spec.halo
    index = _index_box(cell, outer)
    positions = index @ cell.T
    keep = np.linalg.norm(positions, axis=1) <= outer + BOND_TOL
    index, positions = index[keep], positions[keep]

    removed_mask, extra = _apply_defect(spec, index, positions)
    removed = positions[removed_mask]
    index, positions = index[~removed_mask], positions[~removed_mask]

    added = np.zeros(len(positions) + len(extra), dtype=bool)
    added[len(positions):] = True
    if len(extra):
        extra_index = np.rint(extra @ np.linalg.inv(cell).T).astype(int)
        index = np.vstack([index, extra_index])
        positions = np.vstack([positions, extra])

    pairs = cKDTree(positions).query_pairs(spec.cutoff + BOND_TOL, output_type="ndarray")
    if len(pairs) == 0:
        raise LatticeError("No bonds found within the cutoff.")
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    bond_vec = positions[dst] - positions[src]
    bond_ptr = np.zeros(len(positions) + 1, dtype=int)
    np.cumsum(np.bincount(src, minlength=len(positions)), out=bond_ptr[1:])

    in_domain = np.flatnonzero(np.linalg.norm(positions, axis=1) <= spec.domain_radius + BOND_TOL)
    triangles = in_domain[delaunay_triangles(positions[in_domain])]

    model = LatticeModel(
        spec=spec,
        positions=positions,
        index=index,
        added=added,
        removed=removed,
        bond_site=src,
        bond_nbr=dst,
        bond_vec=bond_vec,
        bond_ptr=bond_ptr,
        triangles=triangles,
    )
    logger.info(
        f"Built {spec.defect.kind.value} lattice: {model.n_sites} sites "
        f"({len(in_domain)} in domain), {len(src)} bonds, {len(triangles)} triangles."
    )
    return model


def stencil(model: LatticeModel, u: np.ndarray, site: int) -> np.ndarray:
    """
    Finite-difference stencil {u(l + rho) - u(l)} of a site field, in bond order.

    Parameters:
        model (LatticeModel): The lattice.
        u (np.ndarray): (n_sites, 2) displacement field.
        site (int): Site number l.

    Returns:
        np.ndarray: (m, 2) difference vectors.

    Raises:
        StencilError: If the site has no complete stencil or a neighbour value is missing.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (model.n_sites, 2):
        raise StencilError(f"Expected a field of shape {(model.n_sites, 2)}, got {u.shape}.")
    if not 0 <= site < model.n_sites:
        raise StencilError(f"Site {site} is not part of the lattice.")
    if not model.complete[site]:
        raise StencilError(f"Stencil of site {site} leaves the stored lattice.")
    nbrs, _ = model.neighbors(site)
    values = u[np.append(nbrs, site)]
    if not np.all(np.isfinite(values)):
        raise StencilError(f"Missing neighbour value in the stencil of site {site}.")
    return u[nbrs] - u[site]
