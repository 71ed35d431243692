"""Report emission: a delimited results table, a markdown summary and matplotlib figures."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import ABLATIONS, SWEEPS  # noqa: E402

ROW_ORDER = ["baseline", "a", "b", "c", "d", "e", "f", "g"]
HYPER_LABELS = {"tau": r"$\tau$", "gamma": r"$\gamma$", "alpha": r"$\alpha$", "lam": r"$\lambda$"}

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


class ReportError(ValueError):
    pass


def load_run(path) -> dict:
    """Read one evaluated run: a directory holding ``summary.json`` (and ``run.json``)."""
    path = Path(path)
    if path.is_file():
        path = path.parent
    summary_path = path / "summary.json"
    if not summary_path.exists():
        raise ReportError(f"missing {summary_path}")
    summary = json.loads(summary_path.read_text())
    run = {"dir": str(path), "summary": summary, "metrics": None}
    run_json = path / "run.json"
    if run_json.exists():
        info = json.loads(run_json.read_text())
        ckpt = Path(info.get("checkpoint", ""))
        # checkpoints live in <train_dir>/checkpoints/ckpt_epoch_n
        metrics = ckpt.parent.parent / "metrics.jsonl"
        if metrics.exists():
            run["metrics"] = str(metrics)
    return run


def label_of(run: dict) -> str:
    s = run["summary"]
    return f"{s.get('ablation', '?')}:{s.get('config_hash', '?')[:8]}"


def results_table(runs: Sequence[dict]) -> List[dict]:
    rows = []
    for run in runs:
        s = run["summary"]
        rows.append(
            {
                "run": label_of(run),
                "ablation": s.get("ablation"),
                "config_hash": s.get("config_hash"),
                "n_cases": s["n_cases"],
                "dsc_mean": s["dsc_mean"],
                "dsc_std": s["dsc_std"],
                "assd_mean": s.get("assd_mean"),
                "assd_std": s.get("assd_std"),
                "assd_fill_count": s.get("assd_fill_count"),
                "recall_pooled": s.get("recall_pooled"),
                "precision_pooled": s.get("precision_pooled"),
                **{k: (s.get("hyper") or {}).get(k) for k in SWEEPS},
            }
        )
    return rows


def _fmt(v, digits=2):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def plot_loss_curves(runs, out_path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for run in runs:
            if not run["metrics"]:
                continue
            per_epoch = defaultdict(list)
            for line in Path(run["metrics"]).read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    per_epoch[rec["epoch"]].append(rec["total"])
            epochs = sorted(per_epoch)
            ax.plot(epochs, [np.mean(per_epoch[e]) for e in epochs], marker=".", label=label_of(run))
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean total loss")
        ax.set_title("Training loss")
        if ax.lines:
            ax.legend()
        fig.tight_layout()
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def plot_ablation_bars(rows, out_path) -> Path:
    order = {name: i for i, name in enumerate(ROW_ORDER)}
    rows = sorted(rows, key=lambda r: (order.get(r["ablation"], 99), r["run"]))
    names = [r["run"] for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.5))
        ax0.bar(x, [r["dsc_mean"] for r in rows], yerr=[r["dsc_std"] for r in rows], color="steelblue", capsize=3)
        ax0.set_ylabel("DSC (%)")
        ax0.set_title("DSC")
        assd = [r["assd_mean"] if r["assd_mean"] is not None else np.nan for r in rows]
        assd_err = [r["assd_std"] if r["assd_std"] is not None else 0.0 for r in rows]
        ax1.bar(x, assd, yerr=assd_err, color="darkorange", capsize=3)
        ax1.set_ylabel("ASSD (mm)")
        ax1.set_title("ASSD")
        for ax in (ax0, ax1):
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=45, ha="right")
        fig.tight_layout()
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def sweep_groups(rows) -> Dict[str, List[dict]]:
    """Runs that differ from each other in exactly one swept hyper-parameter."""
    groups = {}
    for param in SWEEPS:
        others = [p for p in SWEEPS if p != param]
        buckets = defaultdict(list)
        for r in rows:
            buckets[(r["ablation"],) + tuple(r[p] for p in others)].append(r)
        for members in buckets.values():
            if len({m[param] for m in members}) >= 2:
                groups.setdefault(param, []).extend(members)
    return groups


def plot_sweep(param: str, rows, out_path) -> Path:
    rows = sorted(rows, key=lambda r: r[param])
    xs = [r[param] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax0 = plt.subplots(figsize=(4, 3))
        ax0.plot(xs, [r["dsc_mean"] for r in rows], "o-", color="steelblue", label="DSC")
        ax0.set_xlabel(HYPER_LABELS.get(param, param))
        ax0.set_ylabel("DSC (%)", color="steelblue")
        ax0.grid(True)
        ax1 = ax0.twinx()
        ax1.plot(xs, [np.nan if r["assd_mean"] is None else r["assd_mean"] for r in rows], "s--", color="darkorange")
        ax1.set_ylabel("ASSD (mm)", color="darkorange")
        ax1.grid(False)
        ax0.set_title(f"Sensitivity to {HYPER_LABELS.get(param, param)}")
        fig.tight_layout()
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def write_report(run_dirs: Sequence, out_dir) -> Dict[str, Path]:
    """Build ``report.csv``, ``report.md`` and PNG figures from evaluated runs."""
    if not run_dirs:
        raise ReportError("no results")
    runs = [load_run(d) for d in run_dirs]
    rows = results_table(runs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}

    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    outputs["csv"] = csv_path

    outputs["loss_curves"] = plot_loss_curves(runs, out_dir / "loss_curves.png")
    outputs["ablation_bars"] = plot_ablation_bars(rows, out_dir / "ablation_bars.png")
    for param, members in sweep_groups(rows).items():
        outputs[f"sweep_{param}"] = plot_sweep(param, members, out_dir / f"sweep_{param}.png")

    lines = ["# Results", ""]
    lines.append("| run | config hash | rows (sup / pseudo) | DSC (%) | ASSD (mm) | recall | filled |")
    lines.append("|---|---|---|---|---|---|---|")
    for r in rows:
        preset = ABLATIONS.get(r["ablation"], {})
        desc = "+".join(preset.get("sup_terms", ())) + " / " + preset.get("pseudo_term", "?")
        if preset.get("pretrained"):
            desc += " (pretrained)"
        lines.append(
            f"| {r['run']} | `{r['config_hash']}` | {desc} | {_fmt(r['dsc_mean'])} ± {_fmt(r['dsc_std'])} "
            f"| {_fmt(r['assd_mean'])} ± {_fmt(r['assd_std'])} | {_fmt(r['recall_pooled'], 3)} "
            f"| {r['assd_fill_count']} |"
        )
    lines += ["", "Missing ASSD values are filled with the largest computed ASSD before averaging.", ""]
    lines += ["## Figures", ""]
    for key, path in outputs.items():
        if path.suffix == ".png":
            lines.append(f"![{key}]({path.name})")
    md_path = out_dir / "report.md"
    md_path.write_text("\n".join(lines) + "\n")
    outputs["markdown"] = md_path
    return outputs
