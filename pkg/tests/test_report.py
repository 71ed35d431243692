import csv
import json

import pytest

from dbdmp.report import ReportError, results_table, sweep_groups, write_report


def _run(tmp_path, name, ablation, tau=0.3, dsc=50.0, assd=3.0):
    d = tmp_path / name
    d.mkdir()
    summary = {
        "n_cases": 2, "dsc_mean": dsc, "dsc_std": 1.0, "assd_mean": assd, "assd_std": 0.5,
        "assd_fill_count": 0, "recall_pooled": 0.8, "precision_pooled": 0.7, "ablation": ablation,
        "config_hash": f"{name:0<16}", "hyper": {"tau": tau, "gamma": 0.8, "alpha": 0.4, "lam": 2.0},
    }
    (d / "summary.json").write_text(json.dumps(summary))
    return d


def test_report_outputs(tmp_path):
    runs = [_run(tmp_path, "r1", "baseline", dsc=5.0, assd=None), _run(tmp_path, "r2", "g")]
    runs[0].joinpath("summary.json").write_text(
        json.dumps({**json.loads(runs[0].joinpath("summary.json").read_text()), "assd_std": None})
    )
    out = write_report(runs, tmp_path / "rep")
    rows = list(csv.DictReader(open(out["csv"])))
    assert [r["ablation"] for r in rows] == ["baseline", "g"]
    assert out["ablation_bars"].stat().st_size > 0
    md = out["markdown"].read_text()
    assert "r2" in md and "n/a" in md


def test_sweep_figures(tmp_path):
    runs = [_run(tmp_path, f"t{i}", "g", tau=t, dsc=40 + i) for i, t in enumerate([0.1, 0.2, 0.3, 0.4])]
    out = write_report(runs, tmp_path / "rep")
    assert "sweep_tau" in out and out["sweep_tau"].exists()
    groups = sweep_groups(results_table([{"summary": json.loads((r / "summary.json").read_text())} for r in runs]))
    assert list(groups) == ["tau"]


def test_report_errors(tmp_path):
    with pytest.raises(ReportError, match="no results"):
        write_report([], tmp_path)
    with pytest.raises(ReportError, match="missing"):
        write_report([tmp_path / "nothing"], tmp_path / "r")
