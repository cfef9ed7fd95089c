# app/cli.py

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import MethodName, RunConfig, RunMode, load_config
from .experiments import (
    ReferenceSolution,
    dual_norm_ratios,
    fit_slope,
    run_adaptive,
    run_apriori,
    run_reference,
    run_truncation,
    summarize,
    write_adapt,
    write_convergence,
    write_plot_data,
    write_run_config,
    write_truncation,
)
from .lattice import DefectKind

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s - %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blendqc", description="Adaptive blended atomistic/continuum coupling.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration.")
    common.add_argument("--method", choices=[m.value for m in MethodName], help="Coupling method.")
    common.add_argument(
        "--defect", choices=[k.value for k in DefectKind if k is not DefectKind.none], help="Defect geometry."
    )
    common.add_argument("--out", help="Output directory.")
    common.add_argument("--full-scale", action="store_true", help="Use R_Omega = 300 unless configured.")
    common.add_argument("--verbose", action="store_true", help="Debug logging and solver traces.")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("reference", parents=[common], help="Fully atomistic reference solution.")
    sub.add_parser("apriori", parents=[common], help="Ladder of a priori graded meshes.")
    sub.add_parser("adaptive", parents=[common], help="Adaptive loop.")
    sub.add_parser("truncation", parents=[common], help="Truncation indicator over domain radii.")
    report = sub.add_parser("report", parents=[common], help="Fitted slopes of convergence files.")
    report.add_argument("files", nargs="*", help="convergence.csv files.")
    report.add_argument("--dual-norm", action="store_true", help="Compare eta with the exact residual dual norm.")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "mode": args.command if args.command in {m.value for m in RunMode} else None,
        "full_scale": True if args.full_scale else None,
        "method": {"name": args.method} if args.method else None,
        "defect": {"kind": args.defect} if args.defect else None,
        "output": {"directory": args.out} if args.out else None,
        "solver": {"trace": True} if args.verbose else None,
    }
    return load_config(args.config, **overrides)


def _reference_for(config: RunConfig, out: Path) -> Optional[ReferenceSolution]:
    path = Path(config.output.reference_file) if config.output.reference_file else out / "reference.npz"
    if path.exists():
        logger.info(f"Loading reference solution from {path}")
        return ReferenceSolution.load(path)
    logger.warning(f"No reference solution at {path}; error columns will be NaN.")
    return None


def _print_slopes(records) -> None:
    dofs = [r.dof for r in records]
    for label, values in (
        ("geometry error", [r.err_geom for r in records]),
        ("energy error", [r.err_energy for r in records]),
        ("eta", [r.eta for r in records]),
    ):
        print(f"{label:>15} slope: {fit_slope(dofs, values):.3f}")


def cmd_reference(config: RunConfig, out: Path) -> int:
    reference = run_reference(config, trace_dir=out)
    reference.save(out / "reference.npz")
    print(f"Reference: {reference.model.n_sites} sites, energy {reference.energy:.10e}")
    return 0


def cmd_apriori(config: RunConfig, out: Path) -> int:
    records = run_apriori(config, _reference_for(config, out), trace_dir=out)
    write_convergence(records, out / "convergence.csv")
    write_plot_data(records, out)
    _print_slopes(records)
    return 0


def cmd_adaptive(config: RunConfig, out: Path) -> int:
    records, result = run_adaptive(config, _reference_for(config, out), out_dir=out)
    write_convergence(records, out / "convergence.csv")
    write_adapt(records, out / "adapt.csv")
    write_plot_data(records, out)
    _print_slopes(records)
    print(f"Stopped after {len(records)} steps: {result.stopped_reason}")
    if result.error:
        print(f"Error: {result.error}", file=sys.stderr)
        return 1
    return 0


def cmd_truncation(config: RunConfig, out: Path) -> int:
    rows = run_truncation(config)
    write_truncation(rows, out / "truncation.csv")
    for row in rows:
        print(f"R_Omega={row['R_Omega']:g}: eta={row['eta']:.6e}, rho_tr={row['rho_tr']:.6e}")
    return 0


def cmd_report(config: RunConfig, files: List[str], dual_norm: bool) -> int:
    if not files and not dual_norm:
        raise ValueError("Nothing to report: give convergence files or --dual-norm.")
    for path in files:
        summary = summarize(path)
        print(path)
        for key, value in summary.items():
            print(f"  {key}: {value:.4f}")
    if dual_norm:
        ratios = dual_norm_ratios(config)
        print(f"eta / dual norm: min {min(ratios):.4f}, max {max(ratios):.4f}, spread {max(ratios) / min(ratios):.3f}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        config = config_from_args(args)
        out = Path(config.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "report":
            return cmd_report(config, args.files, args.dual_norm)
        write_run_config(config, out / "config.json")
        commands = {
            "reference": cmd_reference,
            "apriori": cmd_apriori,
            "adaptive": cmd_adaptive,
            "truncation": cmd_truncation,
        }
        return commands[args.command](config, out)
    except ValueError as ve:
        logger.error(f"ValueError in {args.command}: {ve}")
        print(f"Error: {ve}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"Exception in {args.command}: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
