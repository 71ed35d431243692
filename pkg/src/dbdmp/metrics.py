"""Overlap and surface-distance metrics, plus the failure fill rule for aggregation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

CONNECTIVITY_6 = ndimage.generate_binary_structure(3, 1)


@dataclass
class CaseResult:
    case_id: str
    dsc: float
    assd: Optional[float]
    tp: int
    fp: int
    fn: int
    fill_applied: bool = False

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0


def _pair(pred, gt):
    pred = np.asarray(getattr(pred, "data", pred)).astype(bool)
    gt = np.asarray(getattr(gt, "data", gt)).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def confusion(pred, gt):
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    return tp, int(np.count_nonzero(pred & ~gt)), int(np.count_nonzero(~pred & gt))


def dsc(pred, gt) -> float:
    """Dice coefficient in percent; 100 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.count_nonzero(pred & gt)) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour that is background or off-volume."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, CONNECTIVITY_6, border_value=0)


def surface_distances(a, b, spacing) -> np.ndarray:
    """Distance (mm) from each surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    dist = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dist[sa]


def assd(pred, gt, spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    """Average symmetric surface distance in mm, or ``None`` when either mask is empty."""
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    d_pg = surface_distances(pred, gt, spacing)
    d_gp = surface_distances(gt, pred, spacing)
    return float((d_pg.sum() + d_gp.sum()) / (d_pg.size + d_gp.size))


def assd_bruteforce(pred, gt, spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    """All-pairs reference for :func:`assd`; quadratic in the number of surface voxels."""
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None

    def border(m):
        padded = np.pad(m, 1, constant_values=False)
        core = padded[1:-1, 1:-1, 1:-1]
        out = np.zeros_like(m)
        for axis in range(3):
            for step in (-1, 1):
                out |= core & ~np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
        return out

    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(border(pred)) * sp
    pb = np.argwhere(border(gt)) * sp
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float((d.min(1).sum() + d.min(0).sum()) / (d.shape[0] + d.shape[1]))


def evaluate_case(case_id: str, pred, gt, spacing) -> CaseResult:
    tp, fp, fn = confusion(pred, gt)
    return CaseResult(case_id, dsc(pred, gt), assd(pred, gt, spacing), tp, fp, fn)


def aggregate(results: Sequence[CaseResult]) -> dict:
    """Mean/std of DSC and ASSD; missing ASSDs are filled with the largest computed ASSD."""
    if not results:
        raise ValueError("no results to aggregate")
    dscs = np.array([r.dsc for r in results], dtype=np.float64)
    computed = [r.assd for r in results if r.assd is not None]
    fill_value = max(computed) if computed else None
    filled = []
    for r in results:
        r.fill_applied = r.assd is None and fill_value is not None
        if r.assd is not None:
            filled.append(r.assd)
        elif fill_value is not None:
            filled.append(fill_value)
    tp = sum(r.tp for r in results)
    fn = sum(r.fn for r in results)
    fp = sum(r.fp for r in results)
    summary = {
        "n_cases": len(results),
        "dsc_mean": float(dscs.mean()),
        "dsc_std": float(dscs.std()),
        "assd_defined": bool(computed),
        "assd_mean": float(np.mean(filled)) if computed else None,
        "assd_std": float(np.std(filled)) if computed else None,
        "assd_fill_value": fill_value,
        "assd_fill_count": sum(r.fill_applied for r in results),
        "recall_mean": float(np.mean([r.recall for r in results])),
        "precision_mean": float(np.mean([r.precision for r in results])),
        "recall_pooled": tp / (tp + fn) if tp + fn else 1.0,
        "precision_pooled": tp / (tp + fp) if tp + fp else 1.0,
    }
    return summary


RESULT_FIELDS = ["case_id", "dsc", "assd", "tp", "fp", "fn", "recall", "precision", "fill_applied"]


def write_results(results: Sequence[CaseResult], summary: dict, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for r in results:
            row = asdict(r)
            row["assd"] = "" if r.assd is None else r.assd
            row["recall"] = r.recall
            row["precision"] = r.precision
            writer.writerow(row)
    json_path = out_dir / "summary.json"
    with open(json_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return [csv_path, json_path]


def read_results(csv_path) -> List[CaseResult]:
    out = []
    with open(csv_path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                CaseResult(
                    case_id=row["case_id"],
                    dsc=float(row["dsc"]),
                    assd=None if row["assd"] == "" else float(row["assd"]),
                    tp=int(row["tp"]),
                    fp=int(row["fp"]),
                    fn=int(row["fn"]),
                    fill_applied=row["fill_applied"] == "True",
                )
            )
    return out


def is_missing(value) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))
