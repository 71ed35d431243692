"""Command line entry point: ``dbdmp <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ABLATIONS, PROFILES, SWEEPS, ConfigError, ExperimentConfig
from .report import ReportError, write_report
from .trainer import CheckpointError
from .volumes import PlacementError, SyntheticSpec, data_root

log = logging.getLogger("dbdmp")

EXPECTED_ERRORS = (ConfigError, CheckpointError, ReportError, PlacementError, FileNotFoundError, ValueError)


class CommandError(RuntimeError):
    pass


def load_config(args) -> ExperimentConfig:
    """Validate the experiment config (and overrides) before any data is touched."""
    if args.config in PROFILES:
        cfg = PROFILES[args.config]()
    else:
        cfg = ExperimentConfig.load(args.config)
    ablation = getattr(args, "ablation", None)
    if ablation:
        cfg = cfg.with_ablation(ablation)
    if getattr(args, "set", None):
        cfg = cfg.with_overrides(args.set)
    return cfg


def resolve_data(args) -> Path:
    path = args.data or data_root()
    if path is None:
        raise CommandError("no data directory: pass --data or set DBDMP_DATA_ROOT")
    path = Path(path)
    if not (path / "dataset.json").exists():
        raise FileNotFoundError(f"{path} has no dataset.json")
    return path


def _latest(train_dir: Path):
    marker = train_dir / "checkpoints" / "latest"
    if not marker.exists():
        return None
    return train_dir / "checkpoints" / marker.read_text().strip()


# --------------------------------------------------------------------------- commands


def cmd_init_config(args):
    cfg = PROFILES[args.profile]()
    path = cfg.save(args.out)
    print(f"wrote {path} (config hash {cfg.hash()})")


def cmd_gen_data(args):
    cfg = load_config(args)
    spec = cfg.data.synthetic
    if args.spec:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text()))
    seed = cfg.data.seed if args.seed is None else args.seed
    counts = {"train": cfg.data.n_train, "val": cfg.data.n_val, "test": cfg.data.n_test}
    out = pipeline.generate_dataset(args.out, spec, counts, seed)
    print(f"wrote {sum(counts.values())} cases to {out}")


def cmd_pretrain(args):
    cfg = load_config(args)
    data = resolve_data(args)
    cases = pipeline.load_training_cases(data, cfg, "train")
    exp = Path(args.exp)
    ckpt = pipeline.run_stage(cfg, "pretrain", cases, exp / "pretrain", fresh=args.fresh)
    pipeline.update_manifest(exp, "pretrain", {"dataset": data, "checkpoint": ckpt, "config_hash": cfg.hash()})
    print(ckpt)


def cmd_train(args):
    cfg = load_config(args)
    data = resolve_data(args)
    exp = Path(args.exp)
    init = args.init
    if init is None and cfg.preset["pretrained"]:
        init = cfg.segment.init_checkpoint or _latest(exp / "pretrain")
        if init is None:
            raise CheckpointError(f"ablation {cfg.ablation!r} needs --init or a finished pretrain stage in {exp}")
    cases = pipeline.load_training_cases(data, cfg, "train")
    out = exp / f"train_{cfg.ablation}"
    ckpt = pipeline.run_stage(
        cfg, "segment", cases, out, init_checkpoint=init, fresh=args.fresh, debug_pseudo=args.debug_pseudo
    )
    pipeline.update_manifest(
        exp, f"train_{cfg.ablation}", {"dataset": data, "checkpoint": ckpt, "init": init, "config_hash": cfg.hash()}
    )
    print(ckpt)


def cmd_predict(args):
    cfg = load_config(args)
    data = resolve_data(args)
    exp = Path(args.exp)
    ckpt = args.ckpt or _latest(exp / f"train_{cfg.ablation}")
    if ckpt is None:
        raise CheckpointError(f"no segmentation checkpoint: pass --ckpt or train ablation {cfg.ablation!r} first")
    out = Path(args.out) if args.out else exp / f"pred_{cfg.ablation}_{args.split}"
    pipeline.predict_cases(cfg, ckpt, data, args.split, out, case_list=args.cases)
    pipeline.update_manifest(exp, f"predict_{cfg.ablation}_{args.split}", {"predictions": out, "checkpoint": ckpt})
    print(out)


def cmd_eval(args):
    data = resolve_data(args)
    out = Path(args.out) if args.out else Path(args.pred)
    _, summary = pipeline.evaluate_predictions(args.pred, data, out, gt=args.gt)
    print(
        f"DSC {summary['dsc_mean']:.2f} ± {summary['dsc_std']:.2f} %  "
        f"ASSD {summary['assd_mean'] if summary['assd_mean'] is not None else float('nan'):.2f} mm  "
        f"recall {summary['recall_pooled']:.3f}  -> {out / 'results.csv'}"
    )


def cmd_report(args):
    outputs = write_report(args.results, args.out)
    for key, path in outputs.items():
        print(f"{key}\t{path}")


def cmd_sweep(args):
    base = load_config(args)
    data = resolve_data(args)
    exp = Path(args.exp)
    values = args.values or list(SWEEPS[args.param])
    eval_dirs = []
    for value in values:
        cfg = base.with_overrides([f"loss.{args.param}={value}"])
        tag = f"sweep_{args.param}_{value}"
        init = args.init or (_latest(exp / "pretrain") if cfg.preset["pretrained"] else None)
        cases = pipeline.load_training_cases(data, cfg, "train")
        ckpt = pipeline.run_stage(cfg, "segment", cases, exp / tag, init_checkpoint=init)
        pred = pipeline.predict_cases(cfg, ckpt, data, args.split, exp / f"{tag}_pred")
        pipeline.evaluate_predictions(pred, data)
        eval_dirs.append(pred)
        print(pred)
    if args.report:
        write_report(eval_dirs, exp / f"report_{args.param}")


def cmd_benchmark(args):
    cfg = load_config(args)
    result = pipeline.run_benchmark(
        cfg, args.out, seeds=args.seeds, n_train=args.n_train, n_val=args.n_val,
        annotated_fraction=args.annotated_fraction,
    )
    verdict = pipeline.benchmark_verdict(result, margin=args.margin)
    for row in verdict:
        status = "PASS" if row["passed"] else "FAIL"
        print(f"{status} seed={row['seed']} dsc_gap={row['dsc_gap']:.2f} recall={row['recall'][0]:.3f}>{row['recall'][1]:.3f}")
    write_report([r["eval_dir"] for r in result["runs"]], Path(args.out) / "report")
    if not all(r["passed"] for r in verdict):
        raise CommandError("benchmark margin not met")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbdmp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, ablation=False):
        sp.add_argument("--config", required=True, help="experiment.json, or a profile name (toy, paper)")
        sp.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE", help="override config fields")
        if ablation:
            sp.add_argument("--ablation", choices=sorted(ABLATIONS), help="ablation preset (baseline, a..g)")

    sp = sub.add_parser("init-config", help="write a default experiment.json")
    sp.add_argument("--profile", choices=sorted(PROFILES), default="toy")
    sp.add_argument("--out", default="experiment.json")
    sp.set_defaults(func=cmd_init_config)

    sp = sub.add_parser("gen-data", help="generate a synthetic partially annotated dataset")
    with_config(sp)
    sp.add_argument("--spec", help="synthetic spec JSON overriding the config's data.synthetic")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="self-supervised restoration pretraining")
    with_config(sp)
    sp.add_argument("--data")
    sp.add_argument("--exp", required=True, help="experiment directory")
    sp.add_argument("--fresh", action="store_true", help="discard existing checkpoints")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="weakly supervised segmentation training")
    with_config(sp, ablation=True)
    sp.add_argument("--data")
    sp.add_argument("--exp", required=True)
    sp.add_argument("--init", help="pretraining checkpoint")
    sp.add_argument("--fresh", action="store_true")
    sp.add_argument("--debug-pseudo", action="store_true", help="log pseudo-label entropy histograms")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="sliding-window prediction with post-processing")
    with_config(sp, ablation=True)
    sp.add_argument("--data")
    sp.add_argument("--exp", required=True)
    sp.add_argument("--ckpt")
    sp.add_argument("--split", default="val")
    sp.add_argument("--cases", nargs="*")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="DSC / ASSD evaluation of a prediction directory")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--data")
    sp.add_argument("--gt", default="label_full", choices=["label_full", "label_partial"])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="tables and figures from evaluated runs")
    sp.add_argument("results", nargs="*", help="evaluation directories holding summary.json")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("sweep", help="hyper-parameter sensitivity sweep")
    with_config(sp, ablation=True)
    sp.add_argument("--data")
    sp.add_argument("--exp", required=True)
    sp.add_argument("--param", choices=sorted(SWEEPS), required=True)
    sp.add_argument("--values", nargs="*", type=float)
    sp.add_argument("--init")
    sp.add_argument("--split", default="val")
    sp.add_argument("--report", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("benchmark", help="DBDMP vs baseline directional benchmark on synthetic data")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", nargs="*", type=int, default=[0, 1, 2])
    sp.add_argument("--n-train", type=int, default=40)
    sp.add_argument("--n-val", type=int, default=10)
    sp.add_argument("--annotated-fraction", type=float, default=0.3)
    sp.add_argument("--margin", type=float, default=10.0)
    sp.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        args.func(args)
    except (CommandError, *EXPECTED_ERRORS) as exc:
        msg = " ".join(str(exc).split())
        print(f"dbdmp: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
