# tests/test_experiments.py

import math

import numpy as np
import pytest

from app.config import load_config
from app.experiments import (
    ConvergenceRecord,
    ReferenceSolution,
    dual_norm_ratios,
    fit_slope,
    geometry_error,
    read_convergence,
    record_dicts,
    run_apriori,
    run_reference,
    run_truncation,
    summarize,
    write_adapt,
    write_convergence,
    write_plot_data,
    write_truncation,
)
from app.femesh import full_atomistic_mesh


def small_config(**overrides):
    return load_config(
        lattice={"domain_radius": 12.0},
        defect={"kind": "microcrack", "count": 2},
        regions={"atomistic_radius": 2.0, "blending_width": 2.0},
        apriori={"rungs": [
            {"atomistic_radius": 2.0, "blending_width": 2.0, "coarsening": 1.0},
            {"atomistic_radius": 3.0, "blending_width": 2.0, "coarsening": 1.0},
        ]},
        truncation={"radii": [8.0, 10.0]},
        output={"reference_factor": 1.0},
        solver={"g_tol": 1e-6},
        **overrides,
    )


def power_law_records(n=5):
    records = []
    for step in range(n):
        dof = 100 * 4**step
        err = dof**-0.5
        records.append(ConvergenceRecord(step, dof, 2.0 + step, 2.0, 12.0, 2 * err, 0.1 * err, 4 * err**2, err_geom=err))
    return records


@pytest.fixture(scope="module")
def reference():
    return run_reference(small_config())


def test_fit_slope():
    dofs = [10.0, 100.0, 1000.0, 10000.0]
    assert fit_slope(dofs, [d**-0.5 for d in dofs]) == pytest.approx(-0.5)
    assert fit_slope(dofs, [1.0, 0.1, float("nan"), 0.001]) == pytest.approx(-1.0)
    assert math.isnan(fit_slope([10.0], [1.0]))
    assert math.isnan(fit_slope([10.0, 10.0], [1.0, 0.5]))


def test_fit_slope_uses_the_last_window():
    dofs = [10.0, 100.0, 1000.0, 10000.0]
    errors = [1.0, 1.0, 0.1, 0.01]
    assert fit_slope(dofs, errors, window=2) == pytest.approx(-1.0)


def test_record_efficiency():
    record = ConvergenceRecord(0, 10, 2.0, 2.0, 12.0, eta=0.2, rho_tr=0.1, eta_E=0.05, err_geom=0.1)
    assert record.efficiency == pytest.approx(2.0)
    assert record.efficiency_rigorous == pytest.approx(3.0)
    assert math.isnan(ConvergenceRecord(0, 10, 2.0, 2.0, 12.0, 0.2, 0.1, 0.05).efficiency)


def test_record_dicts_replace_nan():
    rows = record_dicts([ConvergenceRecord(0, 10, 2.0, 2.0, 12.0, 0.2, 0.1, float("nan"))])
    assert rows[0]["eta"] == 0.2
    assert rows[0]["eta_E"] is None
    assert rows[0]["err_geom"] is None
    assert rows[0]["efficiency"] is None


def test_convergence_file_round_trip_and_summary(tmp_path):
    records = power_law_records()
    path = tmp_path / "convergence.csv"
    write_convergence(records, path)
    header = path.read_text().splitlines()[0]
    assert header == "step,DoF,err_geom,err_energy,eta,eta_E,rho_tr,efficiency,efficiency_rigorous"
    data = read_convergence(path)
    assert data["DoF"].tolist() == [r.dof for r in records]
    assert np.isnan(data["err_energy"]).all()
    summary = summarize(path)
    assert summary["slope_err_geom"] == pytest.approx(-0.5)
    assert summary["slope_eta_E"] == pytest.approx(-1.0)
    assert math.isnan(summary["slope_err_energy"])
    assert summary["efficiency_spread"] == pytest.approx(1.0)


def test_read_convergence_rejects_other_files(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("step,DoF\n0,10\n")
    with pytest.raises(ValueError):
        read_convergence(path)
    empty = tmp_path / "empty.csv"
    write_convergence([], empty)
    with pytest.raises(ValueError):
        read_convergence(empty)


def test_adapt_and_plot_files(tmp_path):
    records = power_law_records(3)
    write_adapt(records, tmp_path / "adapt.csv")
    lines = (tmp_path / "adapt.csv").read_text().splitlines()
    assert lines[0] == "step,DoF,R_a,L_b,R_Omega,eta,rho_tr,eta_E,err_geom,wall_time_ms"
    assert len(lines) == 4
    write_plot_data(records, tmp_path)
    for name in ("error_vs_dof.dat", "efficiency_vs_dof.dat", "regions.dat", "plots.gp"):
        assert (tmp_path / name).exists()
    assert len((tmp_path / "regions.dat").read_text().splitlines()) == 4


def test_write_truncation(tmp_path):
    path = tmp_path / "truncation.csv"
    write_truncation([{"R_Omega": 8.0, "eta": 0.5, "rho_tr": 0.01}], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "R_Omega,eta,rho_tr"
    assert lines[1].startswith("8.0,0.5,")


def test_reference_solution(reference, tmp_path):
    assert reference.model.domain_radius == 12.0
    assert reference.energy < 0
    assert np.abs(reference.displacement).max() > 1e-4
    path = tmp_path / "reference.npz"
    reference.save(path)
    loaded = ReferenceSolution.load(path)
    assert loaded.model.n_sites == reference.model.n_sites
    assert np.allclose(loaded.displacement, reference.displacement)
    assert loaded.energy == reference.energy


def test_geometry_error_against_itself(reference):
    mesh = full_atomistic_mesh(reference.model)
    U = reference.displacement[mesh.node_site[~mesh.boundary_nodes]]
    assert geometry_error(reference, mesh, U, 6.0) < 1e-12
    assert geometry_error(reference, mesh, np.zeros_like(U), 6.0) > 0


def test_run_apriori(reference):
    records = run_apriori(small_config(), reference)
    assert [r.step for r in records] == [0, 1]
    assert records[1].dof > records[0].dof
    assert all(r.eta > 0 and r.err_geom > 0 for r in records)
    assert all(np.isfinite(r.err_energy) for r in records)
    assert records[1].atomistic_radius == 3.0


def test_run_apriori_without_reference():
    records = run_apriori(small_config(method={"name": "bqcf1"}))
    assert all(math.isnan(r.err_geom) for r in records)
    assert all(math.isnan(r.eta_E) for r in records)


def test_run_truncation():
    rows = run_truncation(small_config())
    assert [row["R_Omega"] for row in rows] == [8.0, 10.0]
    assert all(row["eta"] > 0 and row["rho_tr"] >= 0 for row in rows)


def test_dual_norm_ratios():
    ratios = dual_norm_ratios(small_config(), radius=6.0, samples=2)
    assert len(ratios) == 2
    assert all(0 < r < 10 for r in ratios)
