"""Stage orchestration shared by the CLI and the benchmark: data, training, prediction, evaluation."""
from __future__ import annotations

import json
import logging
import shutil
import time
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .config import ExperimentConfig
from .inference import binarize_and_postprocess, make_plan, predict
from .metrics import CaseResult, aggregate, evaluate_case, write_results
from .trainer import CheckpointError, Trainer, TrainCase, load_model, prepare_case
from .volumes import (
    LabelVolume,
    SyntheticSpec,
    Volume,
    generate_synthetic_case,
    load_case,
    read_manifest,
    resample,
    resample_array,
    resample_label,
    save_case,
    write_manifest,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def case_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, SPLITS.index(split), index])
    return int(ss.generate_state(1)[0])


def generate_dataset(out_dir, spec: SyntheticSpec, counts: Dict[str, int], seed: int = 0) -> Path:
    """Write ``counts[split]`` synthetic cases per split plus ``dataset.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split in SPLITS:
        ids = []
        for i in range(counts.get(split, 0)):
            cid = f"{split}_{i:03d}"
            s = case_seed(seed, split, i)
            image, full, partial, instances = generate_synthetic_case(s, spec)
            save_case(out_dir / cid, image, full, partial, instances, spec.to_dict(), {"case_seed": s})
            ids.append(cid)
        if ids:
            splits[split] = ids
    write_manifest(out_dir, splits, {"seed": seed, "generator": "synthetic", "spec": spec.to_dict()})
    return out_dir


def split_ids(data_dir, split: str) -> List[str]:
    manifest = read_manifest(data_dir)
    ids = manifest["splits"].get(split, [])
    if not ids:
        raise ValueError(f"split {split!r} in {data_dir} has no cases")
    return ids


def _preprocess(image: Volume, labels, target_spacing):
    if target_spacing is None:
        return image, labels
    image = resample(image, target_spacing)
    return image, [None if y is None else resample_label(y, target_spacing) for y in labels]


def load_training_cases(data_dir, cfg: ExperimentConfig, split: str = "train", label: str = "label_partial"):
    """Preprocessed cases (resample when configured, then z-score) with the chosen label."""
    cases = []
    for cid in split_ids(data_dir, split):
        case = load_case(Path(data_dir) / cid)
        if case.get(label) is None:
            raise ValueError(f"case {cid} has no {label}")
        image, (y,) = _preprocess(case["image"], [case[label]], cfg.data.target_spacing)
        cases.append(prepare_case(cid, image, y))
    return cases


def run_stage(
    cfg: ExperimentConfig,
    stage: str,
    cases: Sequence[TrainCase],
    out_dir,
    init_checkpoint=None,
    fresh: bool = False,
    **kwargs,
) -> Path:
    """Train one stage, resuming from ``out_dir`` when a checkpoint is already there."""
    out_dir = Path(out_dir)
    if fresh and out_dir.exists():
        shutil.rmtree(out_dir)
    if (out_dir / "checkpoints" / "latest").exists():
        trainer = Trainer.resume(cfg, stage, cases, out_dir, **kwargs)
        _truncate_metrics(out_dir / "metrics.jsonl", trainer.epoch)
    else:
        if (out_dir / "metrics.jsonl").exists():
            (out_dir / "metrics.jsonl").unlink()
        trainer = Trainer(cfg, stage, cases, out_dir, init_checkpoint=init_checkpoint, **kwargs)
    cfg.save(out_dir / "experiment.json")
    ckpt = trainer.fit()
    if ckpt is None:
        raise CheckpointError(f"{stage} finished without a checkpoint in {out_dir}")
    return ckpt


def _truncate_metrics(path: Path, epoch: int):
    """Drop records from epochs after the resumed checkpoint."""
    if not path.exists():
        return
    lines = [ln for ln in path.read_text().splitlines() if ln.strip() and json.loads(ln)["epoch"] < epoch]
    path.write_text("".join(ln + "\n" for ln in lines))


def predict_cases(cfg: ExperimentConfig, checkpoint, data_dir, split: str, out_dir, case_list=None) -> Path:
    """Sliding-window prediction + post-processing, written per case as raw files."""
    model = load_model(checkpoint, stage="segment")
    out_dir = Path(out_dir)
    ids = case_list or split_ids(data_dir, split)
    for cid in ids:
        case = load_case(Path(data_dir) / cid)
        raw_image = case["image"]
        image, _ = _preprocess(raw_image, [], cfg.data.target_spacing)
        normed = prepare_case(cid, image).image
        plan = make_plan(normed.shape, cfg.segment.patch_size, cfg.inference.step, cfg.inference.weighting)
        prob = predict(normed, model, plan)
        # intensity filtering is defined on the native (un-normalized) image
        label = binarize_and_postprocess(prob, image, cfg.postprocess)
        if label.shape != raw_image.shape:
            label = LabelVolume(_back_to(label.data, raw_image.shape), raw_image.spacing, raw_image.origin)
            prob = Volume(_back_to(prob.data, raw_image.shape, order=1), raw_image.spacing, raw_image.origin)
        _write_prediction(out_dir / cid, prob, label)
    info = {
        "checkpoint": str(checkpoint),
        "split": split,
        "data_dir": str(data_dir),
        "cases": list(ids),
        "ablation": cfg.ablation,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(out_dir / "run.json", "w") as f:
        json.dump(info, f, indent=2, sort_keys=True)
    return out_dir


def _back_to(data: np.ndarray, shape, order: int = 0) -> np.ndarray:
    return resample_array(data, shape, order)


def _write_prediction(case_dir: Path, prob: Volume, label: LabelVolume):
    case_dir.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(prob.data, dtype="<f4").tofile(case_dir / "pred_prob.raw")
    np.ascontiguousarray(label.data, dtype="u1").tofile(case_dir / "pred_label.raw")
    meta = {
        "shape": list(prob.shape),
        "spacing": list(prob.spacing),
        "origin": list(prob.origin),
        "dtype": {"pred_prob": "float32", "pred_label": "uint8"},
        "byte_order": "little",
        "index_order": "z*(H*W) + y*W + x",
        "files": {"pred_prob": "pred_prob.raw", "pred_label": "pred_label.raw"},
    }
    with open(case_dir / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def read_prediction(case_dir) -> Dict[str, Volume]:
    case_dir = Path(case_dir)
    with open(case_dir / "meta.json") as f:
        meta = json.load(f)
    shape = tuple(meta["shape"])
    geom = dict(spacing=tuple(meta["spacing"]), origin=tuple(meta["origin"]))
    prob = np.fromfile(case_dir / "pred_prob.raw", dtype="<f4").reshape(shape)
    label = np.fromfile(case_dir / "pred_label.raw", dtype="u1").reshape(shape)
    return {"prob": Volume(prob, **geom), "label": LabelVolume(label, **geom)}


def evaluate_predictions(pred_dir, data_dir, out_dir=None, gt: str = "label_full"):
    """Score every case in ``pred_dir`` against ``gt`` labels; writes results.csv and summary.json."""
    pred_dir = Path(pred_dir)
    run_path = pred_dir / "run.json"
    if not run_path.exists():
        raise FileNotFoundError(f"missing {run_path}")
    with open(run_path) as f:
        run = json.load(f)
    if not run["cases"]:
        raise ValueError("no results: prediction directory lists no cases")
    results: List[CaseResult] = []
    for cid in run["cases"]:
        pred = read_prediction(pred_dir / cid)["label"]
        case = load_case(Path(data_dir) / cid)
        truth = case.get(gt)
        if truth is None:
            raise ValueError(f"case {cid} has no {gt}")
        results.append(evaluate_case(cid, pred.data, truth.data, truth.spacing))
    summary = aggregate(results)
    loss = run["config"]["loss"]
    summary.update(
        {
            "ablation": run["ablation"],
            "config_hash": run["config_hash"],
            "experiment_id": run["config"]["experiment_id"],
            "checkpoint": run["checkpoint"],
            "split": run["split"],
            "hyper": {k: loss[k] for k in ("tau", "gamma", "alpha", "lam")},
        }
    )
    out_dir = Path(out_dir) if out_dir else pred_dir
    write_results(results, summary, out_dir)
    return results, summary


def update_manifest(exp_dir, stage: str, outputs: dict):
    """Record a finished stage's outputs in the experiment's ``manifest.json``."""
    exp_dir = Path(exp_dir)
    exp_dir.mkdir(parents=True, exist_ok=True)
    path = exp_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"experiment_id": exp_dir.name, "stages": {}}
    manifest["stages"][stage] = {
        **{k: str(v) for k, v in outputs.items()},
        "completed": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# --------------------------------------------------------------------------- directional benchmark


def benchmark_config(base: ExperimentConfig, seed: int, annotated_fraction: float = 0.3) -> ExperimentConfig:
    d = base.to_dict()
    d["data"]["synthetic"]["annotated_fraction"] = annotated_fraction
    d["pretrain"]["seed"] = seed
    d["segment"]["seed"] = seed
    return ExperimentConfig.from_dict(d)


def run_benchmark(
    base: ExperimentConfig,
    work_dir,
    seeds: Sequence[int] = (0, 1, 2),
    data_seed: int = 0,
    n_train: int = 40,
    n_val: int = 10,
    annotated_fraction: float = 0.3,
    arms: Sequence[str] = ("baseline", "g"),
) -> dict:
    """Train each ablation arm under every seed on one synthetic dataset and score on val."""
    work_dir = Path(work_dir)
    cfg0 = benchmark_config(base, seeds[0], annotated_fraction)
    data_dir = work_dir / "data"
    if not (data_dir / "dataset.json").exists():
        generate_dataset(data_dir, cfg0.data.synthetic, {"train": n_train, "val": n_val}, data_seed)
    train_cases = load_training_cases(data_dir, cfg0, "train")
    runs = []
    t_start = time.time()
    for seed in seeds:
        seed_dir = work_dir / f"seed_{seed}"
        pretrain_ckpt = None
        for arm in arms:
            t0 = time.time()
            cfg = benchmark_config(base, seed, annotated_fraction).with_ablation(arm)
            if cfg.preset["pretrained"] and pretrain_ckpt is None:
                pretrain_ckpt = run_stage(cfg, "pretrain", train_cases, seed_dir / "pretrain")
            init = pretrain_ckpt if cfg.preset["pretrained"] else None
            ckpt = run_stage(cfg, "segment", train_cases, seed_dir / f"train_{arm}", init_checkpoint=init)
            pred_dir = predict_cases(cfg, ckpt, data_dir, "val", seed_dir / f"pred_{arm}")
            _, summary = evaluate_predictions(pred_dir, data_dir)
            runs.append(
                {
                    "seed": seed,
                    "arm": arm,
                    "dsc": summary["dsc_mean"],
                    "recall": summary["recall_pooled"],
                    "assd": summary["assd_mean"],
                    "eval_dir": str(pred_dir),
                    "seconds": time.time() - t0,
                }
            )
            log.info("benchmark seed %d arm %s: DSC %.2f recall %.3f", seed, arm, runs[-1]["dsc"], runs[-1]["recall"])
    out = {"runs": runs, "seconds": time.time() - t_start, "config_hash": base.hash()}
    with open(work_dir / "benchmark.json", "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    return out


def benchmark_verdict(result: dict, margin: float = 10.0, arm: str = "g", baseline: str = "baseline") -> List[dict]:
    """Per seed: does ``arm`` beat ``baseline`` by ``margin`` DSC points with strictly higher recall?"""
    by = {(r["seed"], r["arm"]): r for r in result["runs"]}
    rows = []
    for seed in sorted({r["seed"] for r in result["runs"]}):
        a, b = by.get((seed, arm)), by.get((seed, baseline))
        if a is None or b is None:
            continue
        rows.append(
            {
                "seed": seed,
                "dsc_gap": a["dsc"] - b["dsc"],
                "recall": (a["recall"], b["recall"]),
                "passed": a["dsc"] - b["dsc"] >= margin and a["recall"] > b["recall"],
            }
        )
    return rows
