import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .adaptive import AdaptParams, MarkTarget
from .coupling import FarField, MethodSpec
from .lattice import TRIANGULAR_CELL, DefectKind, DefectSpec, LatticeSpec
from .potential import EAMParams, Loading, default_rho0

logger = logging.getLogger(__name__)

DESK_RADIUS = 80.0
FULL_SCALE_RADIUS = 300.0


class RunMode(str, Enum):
    reference = "reference"
    apriori = "apriori"
    adaptive = "adaptive"
    truncation = "truncation"

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


class MethodName(str, Enum):
    bqce = "bqce"
    bqcf1 = "bqcf1"
    bqcf2 = "bqcf2"
    bgfc1 = "bgfc1"
    bgfc2 = "bgfc2"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for member in cls:
                if member.value == value.lower():
                    return member
        return None


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LatticeConfig(Section):
    domain_radius: Optional[float] = Field(None, description="R_Omega; defaults to 80, or 300 with full_scale.")
    cutoff: float = Field(2.0, description="Interaction radius r_cut.")
    cell: Tuple[Tuple[float, float], Tuple[float, float]] = Field(
        TRIANGULAR_CELL, description="Cell matrix A, columns are the lattice vectors."
    )

    @field_validator("cutoff")
    def validate_cutoff(cls, value: float) -> float:
        if value < 1:
            raise ValueError("cutoff must be at least 1")
        return value

    @field_validator("cell")
    def validate_cell(cls, value):
        (a, b), (c, d) = value
        if a * d - b * c <= 0:
            raise ValueError("cell matrix must have a positive determinant")
        return value


class DefectConfig(Section):
    kind: DefectKind = Field(DefectKind.microcrack, description="none, microcrack or frenkel.")
    count: int = Field(6, ge=1, description="Number of sites removed by the micro-crack.")


class PotentialConfig(Section):
    a: float = Field(4.0, gt=0, description="Pair potential stiffness.")
    b: float = Field(3.0, gt=0, description="Electron density decay.")
    C: float = Field(10.0, gt=0, description="Embedding strength.")
    rho0: Optional[float] = Field(None, gt=0, description="Reference density; resolved to 6 exp(-0.9 b) when omitted.")

    @model_validator(mode="after")
    def resolve_rho0(self) -> "PotentialConfig":
        if self.rho0 is None:
            self.rho0 = default_rho0(self.b)
        return self


class MethodConfig(Section):
    name: MethodName = Field(MethodName.bgfc1, description="bqce, bqcf1, bqcf2, bgfc1 or bgfc2.")


class LoadingConfig(Section):
    stretch: float = Field(0.03, description="Far-field stretch S.")
    shear: float = Field(0.03, description="Far-field shear gamma.")


class RegionsConfig(Section):
    atomistic_radius: float = Field(3.0, ge=0, description="Initial R_a.")
    blending_width: float = Field(2.0, ge=0, description="Initial L_b.")


class MeshConfig(Section):
    coarsening: float = Field(1.5, ge=1, description="Spacing ratio of consecutive continuum rings.")


class AdaptiveConfig(Section):
    N_max: int = Field(20000, ge=1, description="DoF cap.")
    eta_tol: float = Field(1e-6, gt=0, description="Stopping tolerance on eta.")
    tau1: float = Field(1.0, gt=0, description="Truncation threshold.")
    tau2: float = Field(0.7, gt=0, lt=1, description="Interface layer threshold.")
    K: int = Field(5, ge=1, description="Largest layer count searched.")
    theta_iters: int = Field(30, ge=1, description="Bisection iterations for theta.")
    max_steps: int = Field(30, ge=1, description="Step limit.")
    max_enlargements: int = Field(3, ge=0, description="Domain enlargements allowed.")
    target: MarkTarget = Field(MarkTarget.geometry, description="geometry or energy marking.")


class SolverConfig(Section):
    g_tol: float = Field(1e-7, gt=0, description="Max-norm tolerance of the gradient or residual.")
    max_iter: int = Field(2000, ge=1, description="Iteration cap.")
    trace: bool = Field(False, description="Write per-iteration solver traces.")


class Rung(Section):
    atomistic_radius: float = Field(..., ge=0)
    blending_width: float = Field(..., ge=0)
    coarsening: float = Field(1.5, ge=1)


def _default_rungs() -> List[Rung]:
    return [
        Rung(atomistic_radius=3, blending_width=2, coarsening=1.5),
        Rung(atomistic_radius=5, blending_width=3, coarsening=1.4),
        Rung(atomistic_radius=8, blending_width=4, coarsening=1.3),
        Rung(atomistic_radius=12, blending_width=6, coarsening=1.2),
    ]


class AprioriConfig(Section):
    rungs: List[Rung] = Field(default_factory=_default_rungs, description="Graded-mesh ladder.")


class TruncationConfig(Section):
    radii: List[float] = Field([40.0, 80.0, 160.0], description="Domain radii of the truncation study.")


class OutputConfig(Section):
    directory: str = Field("results", description="Output directory.")
    measure_radius: Optional[float] = Field(None, description="R_meas; defaults to R_Omega / 2.")
    reference_factor: float = Field(2.0, ge=1, description="Reference domain radius over R_Omega.")
    reference_file: Optional[str] = Field(None, description="Precomputed reference (.npz).")


class RunConfig(Section):
    mode: RunMode = Field(RunMode.adaptive, description="reference, apriori, adaptive or truncation.")
    full_scale: bool = Field(False, description="Use R_Omega = 300 when the radius is not given.")
    lattice: LatticeConfig = Field(default_factory=LatticeConfig)
    defect: DefectConfig = Field(default_factory=DefectConfig)
    potential: PotentialConfig = Field(default_factory=PotentialConfig)
    method: MethodConfig = Field(default_factory=MethodConfig)
    loading: LoadingConfig = Field(default_factory=LoadingConfig)
    regions: RegionsConfig = Field(default_factory=RegionsConfig)
    mesh: MeshConfig = Field(default_factory=MeshConfig)
    adaptive: AdaptiveConfig = Field(default_factory=AdaptiveConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    apriori: AprioriConfig = Field(default_factory=AprioriConfig)
    truncation: TruncationConfig = Field(default_factory=TruncationConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def validate_geometry(self) -> "RunConfig":
        radius = self.domain_radius
        if radius <= self.lattice.cutoff:
            raise ValueError(f"domain radius {radius} must exceed the cutoff {self.lattice.cutoff}")
        outer = self.regions.atomistic_radius + self.regions.blending_width
        if outer >= radius:
            raise ValueError(f"R_a + L_b = {outer} must be smaller than R_Omega = {radius}")
        return self

    @property
    def domain_radius(self) -> float:
        if self.lattice.domain_radius is not None:
            return self.lattice.domain_radius
        return FULL_SCALE_RADIUS if self.full_scale else DESK_RADIUS

    @property
    def measure_radius(self) -> float:
        if self.output.measure_radius is not None:
            return self.output.measure_radius
        return self.domain_radius / 2.0

    def lattice_spec(self, domain_radius: Optional[float] = None) -> LatticeSpec:
        return LatticeSpec(
            domain_radius or self.domain_radius,
            self.lattice.cutoff,
            DefectSpec(self.defect.kind, self.defect.count),
            self.lattice.cell,
        )

    def method_spec(self) -> MethodSpec:
        return MethodSpec.from_name(self.method.name.value)

    def far_field(self) -> FarField:
        p = self.potential
        logger.info(f"EAM potential a={p.a}, b={p.b}, C={p.C}, rho0={p.rho0:.10g}")
        return FarField(
            EAMParams(p.a, p.b, p.C, p.rho0),
            Loading(self.loading.stretch, self.loading.shear),
            self.lattice.cell,
            self.lattice.cutoff,
        )

    def adapt_params(self) -> AdaptParams:
        return AdaptParams(**self.adaptive.model_dump())


def load_config(path=None, **overrides) -> RunConfig:
    """
    Reads a TOML run configuration; keyword overrides replace top-level keys or,
    given as dicts, merge into sections.

    Raises:
        ValueError: For unreadable files, unknown keys or invalid values.
    """
    data = {}
    if path is not None:
        try:
            with open(Path(path), "rb") as handle:
                data = tomllib.load(handle)
        except (OSError, tomllib.TOMLDecodeError) as e:
            logger.error(f"Cannot read configuration {path}: {e}")
            raise ValueError(f"Cannot read configuration {path}: {e}") from e
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return RunConfig.model_validate(data)
