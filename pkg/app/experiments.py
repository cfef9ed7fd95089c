import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .adaptive import AdaptResult, adapt_loop
from .config import RunConfig
from .coupling import Displacement, MethodSpec, Scheme, SolverTrace, solve
from .estimator import (
    EstimateReport,
    estimate,
    residual_dual_norm,
    residual_forces,
    triangle_gradients,
    write_estimate,
)
from .femesh import CoupledMesh, build_initial_mesh, full_atomistic_mesh, interpolate_to_lattice, write_mesh
from .lattice import DefectKind, DefectSpec, LatticeModel, LatticeSpec, build_lattice

logger = logging.getLogger(__name__)

SLOPE_WINDOW = 6
CONVERGENCE_COLUMNS = [
    "step", "DoF", "err_geom", "err_energy", "eta", "eta_E", "rho_tr", "efficiency", "efficiency_rigorous",
]
ADAPT_COLUMNS = ["step", "DoF", "R_a", "L_b", "R_Omega", "eta", "rho_tr", "eta_E", "err_geom", "wall_time_ms"]


@dataclass(frozen=True, eq=False)
class ReferenceSolution:
    """Fully atomistic solution on a large domain, stored per lattice site."""

    model: LatticeModel
    displacement: np.ndarray
    energy: float

    def save(self, path) -> None:
        spec = self.model.spec
        np.savez(
            path,
            domain_radius=spec.domain_radius,
            cutoff=spec.cutoff,
            cell=np.array(spec.cell, dtype=float),
            defect_kind=spec.defect.kind.value,
            defect_count=spec.defect.count,
            index=self.model.index,
            added=self.model.added,
            displacement=self.displacement,
            energy=self.energy,
        )
        logger.info(f"Reference solution written to {path}")

    @classmethod
    def load(cls, path) -> "ReferenceSolution":
        with np.load(path, allow_pickle=False) as data:
            cell = tuple(tuple(float(v) for v in row) for row in data["cell"])
            spec = LatticeSpec(
                float(data["domain_radius"]),
                float(data["cutoff"]),
                DefectSpec(DefectKind(str(data["defect_kind"])), int(data["defect_count"])),
                cell,
            )
            model = build_lattice(spec)
            if model.n_sites != len(data["displacement"]) or not np.array_equal(model.index, data["index"]):
                raise ValueError(f"Reference file {path} does not match its lattice.")
            return cls(model, np.array(data["displacement"]), float(data["energy"]))


@dataclass
class ConvergenceRecord:
    step: int
    dof: int
    atomistic_radius: float
    blending_width: float
    domain_radius: float
    eta: float
    rho_tr: float
    eta_E: float
    err_geom: float = float("nan")
    err_energy: float = float("nan")
    wall_time_ms: float = 0.0

    @property
    def efficiency(self) -> float:
        return self.eta / self.err_geom if self.err_geom > 0 else float("nan")

    @property
    def efficiency_rigorous(self) -> float:
        return (self.eta + self.rho_tr) / self.err_geom if self.err_geom > 0 else float("nan")


def _trace(config: RunConfig, trace_dir, name: str) -> Optional[SolverTrace]:
    if not config.solver.trace or trace_dir is None:
        return None
    Path(trace_dir).mkdir(parents=True, exist_ok=True)
    return SolverTrace(Path(trace_dir) / f"trace_{name}.csv")


def run_reference(config: RunConfig, radius: Optional[float] = None, trace_dir=None) -> ReferenceSolution:
    """
    Pure atomistic solve (blending function zero, lattice-resolution mesh) on a domain
    reference_factor times R_Omega.
    """
    radius = radius or config.output.reference_factor * config.domain_radius
    model = build_lattice(config.lattice_spec(radius))
    mesh = full_atomistic_mesh(model)
    far_field = config.far_field()
    solution = solve(
        MethodSpec("bqce", 1),
        mesh,
        far_field,
        g_tol=config.solver.g_tol,
        max_iter=config.solver.max_iter,
        trace=_trace(config, trace_dir, "reference"),
    )
    logger.info(f"Reference solved on R_Omega={radius} with {mesh.n_dof} DoF, energy {solution.energy:.10e}")
    return ReferenceSolution(model, solution.lattice, solution.energy)


def geometry_error(reference: ReferenceSolution, mesh: CoupledMesh, U: np.ndarray, measure_radius: float) -> float:
    """
    ||grad I_a (u_ref - u_h)|| over reference lattice triangles with barycenter in B(measure_radius).
    """
    model = reference.model
    diff = reference.displacement - interpolate_to_lattice(mesh, U, model)
    tris = model.triangles
    inside = np.linalg.norm(model.positions[tris].mean(axis=1), axis=1) < measure_radius
    grads = triangle_gradients(model.positions, tris[inside], diff)
    return float(np.sqrt(np.sum(np.abs(model.triangle_areas[inside]) * np.sum(grads**2, axis=(1, 2)))))


def energy_error(reference: ReferenceSolution, solution: Displacement) -> float:
    if not np.isfinite(solution.energy):
        return float("nan")
    return abs(reference.energy - solution.energy)


def _record(step, mesh, solution, report: EstimateReport, reference, config, wall_time_ms=0.0) -> ConvergenceRecord:
    record = ConvergenceRecord(
        step=step,
        dof=mesh.n_dof,
        atomistic_radius=mesh.regions.atomistic_radius,
        blending_width=mesh.regions.blending_width,
        domain_radius=mesh.domain_radius,
        eta=report.eta,
        rho_tr=report.rho_tr,
        eta_E=report.eta_E,
        wall_time_ms=wall_time_ms,
    )
    if reference is not None:
        record.err_geom = geometry_error(reference, mesh, solution.values, config.measure_radius)
        record.err_energy = energy_error(reference, solution)
    return record


def run_apriori(
    config: RunConfig, reference: Optional[ReferenceSolution] = None, trace_dir=None
) -> List[ConvergenceRecord]:
    """Non-adaptive solves on the configured ladder of graded meshes."""
    method = config.method_spec()
    far_field = config.far_field()
    model = build_lattice(config.lattice_spec())
    records = []
    for step, rung in enumerate(config.apriori.rungs):
        mesh = build_initial_mesh(model, rung.atomistic_radius, rung.blending_width, rung.coarsening, method.fe_order)
        solution = solve(
            method,
            mesh,
            far_field,
            g_tol=config.solver.g_tol,
            max_iter=config.solver.max_iter,
            trace=_trace(config, trace_dir, f"apriori_{step:02d}"),
        )
        with_energy = method.scheme is not Scheme.bqcf
        report = estimate(mesh, far_field, solution.values, method.scheme, with_energy=with_energy)
        records.append(_record(step, mesh, solution, report, reference, config))
        logger.info(f"A priori rung {step}: R_a={rung.atomistic_radius}, L_b={rung.blending_width}, DoF={mesh.n_dof}")
    return records


def run_adaptive(config: RunConfig, reference: Optional[ReferenceSolution] = None, out_dir=None):
    """
    Runs the adaptive loop and joins every state with the reference errors.

    Returns:
        tuple: (records, AdaptResult).
    """
    method = config.method_spec()
    result = adapt_loop(
        config.lattice_spec(),
        method,
        config.far_field(),
        config.regions.atomistic_radius,
        config.regions.blending_width,
        config.adapt_params(),
        coarsening=config.mesh.coarsening,
        g_tol=config.solver.g_tol,
        max_iter=config.solver.max_iter,
    )
    records = [
        _record(s.step, s.mesh, s.solution, s.report, reference, config, s.wall_time_ms) for s in result.states
    ]
    if out_dir is not None:
        write_states(result, Path(out_dir))
    return records, result


def run_truncation(config: RunConfig) -> List[Dict[str, float]]:
    """Estimator on a series of domain radii with the initial regions."""
    method = config.method_spec()
    far_field = config.far_field()
    rows = []
    for radius in config.truncation.radii:
        model = build_lattice(config.lattice_spec(radius))
        mesh = build_initial_mesh(
            model, config.regions.atomistic_radius, config.regions.blending_width, config.mesh.coarsening, method.fe_order
        )
        solution = solve(method, mesh, far_field, g_tol=config.solver.g_tol, max_iter=config.solver.max_iter)
        report = estimate(mesh, far_field, solution.values, method.scheme, with_energy=False)
        rows.append({"R_Omega": radius, "eta": report.eta, "rho_tr": report.rho_tr})
        logger.info(f"Truncation study R_Omega={radius}: eta={report.eta:.4e}, rho_tr={report.rho_tr:.4e}")
    return rows


def dual_norm_ratios(
    config: RunConfig, radius: float = 8.0, samples: int = 10, amplitude: float = 0.01, seed: int = 0
) -> List[float]:
    """
    eta over the exact discrete dual norm of the residual on a small fully atomistic
    instance, for seeded random perturbations of its equilibrium.
    """
    far_field = config.far_field()
    model = build_lattice(config.lattice_spec(radius))
    mesh = full_atomistic_mesh(model)
    base = solve(MethodSpec("bqce", 1), mesh, far_field, g_tol=config.solver.g_tol, max_iter=config.solver.max_iter)
    ratios = []
    for i in range(samples):
        rng = np.random.default_rng(seed + i)
        U = base.values + amplitude * rng.standard_normal(base.values.shape)
        forces = residual_forces(model, mesh.interpolation @ U, far_field)
        norm = residual_dual_norm(model, forces)
        report = estimate(mesh, far_field, U, Scheme.bqce, with_energy=False)
        ratios.append(report.eta / norm if norm > 0 else float("nan"))
    logger.info(f"eta / dual norm over {samples} samples: min {min(ratios):.4f}, max {max(ratios):.4f}")
    return ratios


def fit_slope(dofs: Sequence[float], errors: Sequence[float], window: int = SLOPE_WINDOW) -> float:
    """Least-squares slope of log10(error) against log10(DoF) over the last `window` finite points."""
    pairs = [(d, e) for d, e in zip(dofs, errors) if d > 0 and e > 0 and math.isfinite(e)]
    pairs = pairs[-window:]
    if len(pairs) < 2:
        return float("nan")
    x = np.log10([d for d, _ in pairs])
    y = np.log10([e for _, e in pairs])
    if np.ptp(x) == 0:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_convergence(records: Sequence[ConvergenceRecord], path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CONVERGENCE_COLUMNS)
        for r in records:
            row = (r.step, r.dof, r.err_geom, r.err_energy, r.eta, r.eta_E, r.rho_tr, r.efficiency)
            writer.writerow([_fmt(v) for v in row] + [_fmt(r.efficiency_rigorous)])


def write_adapt(records: Sequence[ConvergenceRecord], path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(ADAPT_COLUMNS)
        for r in records:
            row = (r.step, r.dof, r.atomistic_radius, r.blending_width, r.domain_radius, r.eta, r.rho_tr, r.eta_E)
            writer.writerow([_fmt(v) for v in row] + [_fmt(r.err_geom), f"{r.wall_time_ms:.3f}"])


def write_states(result: AdaptResult, out_dir: Path) -> None:
    """Per-step estimator tables and the final mesh."""
    estimates = out_dir / "estimates"
    estimates.mkdir(parents=True, exist_ok=True)
    for state in result.states:
        write_estimate(state.report, estimates / f"step_{state.step:03d}.csv")
    if result.states:
        write_mesh(result.states[-1].mesh, out_dir / "mesh_final.txt")


def write_plot_data(records: Sequence[ConvergenceRecord], out_dir) -> None:
    """gnuplot data for error vs DoF, efficiency vs DoF and R_a vs L_b, plus a script rendering them."""
    out_dir = Path(out_dir)
    with open(out_dir / "error_vs_dof.dat", "w") as handle:
        handle.write("# DoF err_geom err_energy eta eta_E\n")
        for r in records:
            handle.write(f"{r.dof} {r.err_geom:.12e} {r.err_energy:.12e} {r.eta:.12e} {r.eta_E:.12e}\n")
    with open(out_dir / "efficiency_vs_dof.dat", "w") as handle:
        handle.write("# DoF efficiency efficiency_rigorous\n")
        for r in records:
            handle.write(f"{r.dof} {r.efficiency:.12e} {r.efficiency_rigorous:.12e}\n")
    with open(out_dir / "regions.dat", "w") as handle:
        handle.write("# R_a L_b\n")
        for r in records:
            handle.write(f"{r.atomistic_radius:.6f} {r.blending_width:.6f}\n")
    with open(out_dir / "plots.gp", "w") as handle:
        handle.write(
            "set terminal pngcairo size 800,600\n"
            "set logscale xy\n"
            "set xlabel 'DoF'\n"
            "set output 'error_vs_dof.png'\n"
            "plot 'error_vs_dof.dat' using 1:2 with linespoints title 'geometry error', \\\n"
            "     '' using 1:4 with linespoints title 'eta'\n"
            "set output 'efficiency_vs_dof.png'\n"
            "unset logscale y\n"
            "plot 'efficiency_vs_dof.dat' using 1:2 with linespoints title 'efficiency'\n"
            "unset logscale\n"
            "set xlabel 'R_a'\n"
            "set output 'regions.png'\n"
            "plot 'regions.dat' using 1:2 with linespoints title 'L_b'\n"
        )


def write_run_config(config: RunConfig, path) -> None:
    """The resolved run configuration, potential parameters included."""
    Path(path).write_text(config.model_dump_json(indent=2))
    logger.info(f"Run configuration written to {path}")


def write_truncation(rows: Sequence[Dict[str, float]], path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["R_Omega", "eta", "rho_tr"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def read_convergence(path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        raise ValueError(f"{path} has no rows.")
    missing = set(CONVERGENCE_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"{path} is missing columns {sorted(missing)}.")
    return {key: np.array([float(row[key]) for row in rows]) for key in CONVERGENCE_COLUMNS}


def summarize(path, window: int = SLOPE_WINDOW) -> Dict[str, float]:
    """Fitted slopes against DoF and the efficiency spread of one convergence file."""
    data = read_convergence(path)
    summary = {
        f"slope_{key}": fit_slope(data["DoF"], data[key], window) for key in ("err_geom", "err_energy", "eta", "eta_E")
    }
    efficiency = data["efficiency"][np.isfinite(data["efficiency"]) & (data["efficiency"] > 0)]
    summary["efficiency_spread"] = float(efficiency.max() / efficiency.min()) if len(efficiency) else float("nan")
    return summary


def record_dicts(records: Sequence[ConvergenceRecord]) -> List[dict]:
    """Records as plain dicts, NaN replaced by None."""
    out = []
    for r in records:
        row = asdict(r)
        row["efficiency"] = r.efficiency
        row["efficiency_rigorous"] = r.efficiency_rigorous
        out.append({k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()})
    return out
