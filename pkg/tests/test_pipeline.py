import json

import numpy as np

from dbdmp import pipeline
from dbdmp.trainer import read_metrics

from conftest import SMALL_SPEC, small_config


def test_generate_dataset_seeds_are_distinct(tmp_path):
    pipeline.generate_dataset(tmp_path, SMALL_SPEC, {"train": 2, "val": 1}, seed=0)
    manifest = json.loads((tmp_path / "dataset.json").read_text())
    assert manifest["splits"] == {"train": ["train_000", "train_001"], "val": ["val_000"]}
    seeds = {pipeline.case_seed(0, s, i) for s in ("train", "val") for i in range(3)}
    assert len(seeds) == 6


def test_run_stage_resumes_and_truncates_metrics(tmp_path):
    cfg = small_config().with_ablation("c")
    pipeline.generate_dataset(tmp_path / "data", SMALL_SPEC, {"train": 2}, 0)
    cases = pipeline.load_training_cases(tmp_path / "data", cfg)
    out = tmp_path / "run"
    ref = pipeline.run_stage(cfg, "segment", cases, tmp_path / "ref")
    # simulate an interrupted run: checkpoint at epoch 1 plus a stray record from epoch 1
    pipeline.run_stage(cfg.with_overrides(["segment.epochs=3"]), "segment", cases, out)
    marker = out / "checkpoints" / "latest"
    marker.write_text("ckpt_epoch_1\n")
    ckpt = pipeline.run_stage(cfg, "segment", cases, out)
    assert ckpt.name == ref.name
    a = read_metrics(tmp_path / "ref" / "metrics.jsonl")
    b = read_metrics(out / "metrics.jsonl")
    assert [r["epoch"] for r in a] == [r["epoch"] for r in b]
    assert max(abs(x["total"] - y["total"]) for x, y in zip(a, b)) <= 1e-6


def test_predictions_resampled_back_to_native_grid(tmp_path):
    cfg = small_config().with_ablation("baseline")
    d = cfg.to_dict()
    d["data"]["target_spacing"] = [2.0, 1.0, 1.0]
    cfg = type(cfg).from_dict(d)
    pipeline.generate_dataset(tmp_path / "data", SMALL_SPEC, {"train": 2, "val": 1}, 0)
    cases = pipeline.load_training_cases(tmp_path / "data", cfg)
    assert cases[0].image.shape == (8, 32, 32)
    ckpt = pipeline.run_stage(cfg, "segment", cases, tmp_path / "run")
    pred = pipeline.predict_cases(cfg, ckpt, tmp_path / "data", "val", tmp_path / "pred")
    out = pipeline.read_prediction(pred / "val_000")
    assert out["label"].shape == SMALL_SPEC.shape
    _, summary = pipeline.evaluate_predictions(pred, tmp_path / "data")
    assert summary["n_cases"] == 1 and summary["ablation"] == "baseline"


def test_benchmark_verdict_logic():
    runs = [
        {"seed": 0, "arm": "g", "dsc": 60.0, "recall": 0.9},
        {"seed": 0, "arm": "baseline", "dsc": 40.0, "recall": 0.5},
        {"seed": 1, "arm": "g", "dsc": 45.0, "recall": 0.9},
        {"seed": 1, "arm": "baseline", "dsc": 40.0, "recall": 0.5},
        {"seed": 2, "arm": "g", "dsc": 60.0, "recall": 0.5},
        {"seed": 2, "arm": "baseline", "dsc": 40.0, "recall": 0.5},
    ]
    verdict = pipeline.benchmark_verdict({"runs": runs}, margin=10)
    assert [v["passed"] for v in verdict] == [True, False, False]
    assert np.isclose(verdict[0]["dsc_gap"], 20.0)
