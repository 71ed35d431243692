"""Restoration pretraining and weakly supervised segmentation training."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from . import losses as L
from .config import ExperimentConfig, TrainConfig
from .corruption import random_compose, rescale_unit
from .network import DualBranchNet, NetworkConfig, build_network
from .pseudolabel import build as build_pseudo_label
from .pseudolabel import entropy_histogram
from .volumes import LabelVolume, Volume, normalize, sample_patch

log = logging.getLogger(__name__)

CKPT_PREFIX = "ckpt_epoch_"


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainCase:
    case_id: str
    image: Volume
    label: Optional[LabelVolume] = None


def prepare_case(case_id: str, image: Volume, label: Optional[LabelVolume] = None) -> TrainCase:
    """Z-score the image; the label (if any) is carried unchanged."""
    return TrainCase(case_id, normalize(image), label)


def poly_lr(initial_lr: float, epoch: int, epochs: int, exponent: float = 0.9) -> float:
    return initial_lr * (1.0 - epoch / epochs) ** exponent


def set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def stage_network_config(cfg: ExperimentConfig, stage: str) -> NetworkConfig:
    head = "reconstruction" if stage == "pretrain" else "segmentation"
    return NetworkConfig(**{**cfg.network.to_dict(), "head_mode": head})


class Trainer:
    """Owns the model, optimizer and generator state for one training stage.

    ``out_dir`` receives ``metrics.jsonl`` and ``checkpoints/ckpt_epoch_{n}``
    directories plus a ``latest`` marker.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        stage: str,
        cases: Sequence[TrainCase],
        out_dir,
        init_checkpoint=None,
        debug_pseudo: bool = False,
        on_epoch_end: Optional[Callable[["Trainer"], None]] = None,
        require_init: bool = True,
    ):
        if stage not in ("pretrain", "segment"):
            raise ValueError(f"unknown stage {stage!r}")
        if not cases:
            raise ValueError("training dataset is empty")
        self.cfg = cfg
        self.stage = stage
        self.tc: TrainConfig = getattr(cfg, stage)
        self.loss_cfg = cfg.loss
        self.cases = list(cases)
        self.out_dir = Path(out_dir)
        self.ckpt_dir = self.out_dir / "checkpoints"
        self.debug_pseudo = debug_pseudo
        self.on_epoch_end = on_epoch_end

        set_determinism(self.tc.seed)
        self.rng = np.random.default_rng(self.tc.seed)
        self.net_cfg = stage_network_config(cfg, stage)
        self.dual = stage == "pretrain" or cfg.preset["dual"]
        self.model = build_network(self.net_cfg, dual=self.dual)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(),
            lr=self.tc.initial_lr,
            momentum=self.tc.momentum,
            weight_decay=self.tc.weight_decay,
            nesterov=self.tc.nesterov,
        )
        self.epoch = 0
        self.history: List[dict] = []

        init = init_checkpoint or self.tc.init_checkpoint
        if stage == "segment" and cfg.preset["pretrained"] and init is None and require_init:
            raise CheckpointError(
                f"ablation {cfg.ablation!r} needs a pretrained init checkpoint (--init)"
            )
        if init is not None:
            self.load_trunk(init)

    # -- schedules

    def lr_at(self, epoch: int) -> float:
        return poly_lr(self.tc.initial_lr, epoch, self.tc.epochs, self.tc.poly_exponent)

    def lambda_at(self, epoch: int) -> float:
        return L.ramp_up(epoch, self.loss_cfg.lam, self.loss_cfg.t_max)

    # -- data

    def sample_batch(self):
        images, targets = [], []
        ps = self.tc.patch_size
        for _ in range(self.tc.batch_size):
            case = self.cases[int(self.rng.integers(len(self.cases)))]
            if self.stage == "pretrain":
                patch = sample_patch(case.image, None, self.rng, ps, oversample_fg=0.0)
                corrupted, clean = random_compose(rescale_unit(patch.image), self.rng, self.cfg.corruption)
                images.append(corrupted)
                targets.append(clean)
            else:
                patch = sample_patch(case.image, case.label, self.rng, ps, self.tc.oversample_fg)
                images.append(patch.image)
                targets.append(patch.label)
        x = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
        if self.stage == "pretrain":
            y = torch.from_numpy(np.stack(targets)[:, None].astype(np.float32))
        else:
            y = torch.from_numpy(np.stack(targets).astype(np.float32))
        return x, y

    # -- one iteration

    def step_losses(self, x, y, epoch: int):
        record = {}
        if self.stage == "pretrain":
            p_main, p_aux = self.model(x)
            rec = L.mse_reconstruction(p_main, p_aux, y)
            terms = {
                "mse_main": torch.mean((p_main - y) ** 2),
                "mse_aux": torch.mean((p_aux - y) ** 2),
                "total": rec,
            }
            return terms, record
        if not self.dual:
            p = self.model(x)
            return L.baseline_loss(p, y, self.loss_cfg), record
        p_main, p_aux = self.model(x)
        pl = build_pseudo_label(
            p_main, p_aux, y, self.loss_cfg.tau, rng=self.rng, mode=self.loss_cfg.sharpen_mode
        )
        record["theta"] = pl.theta
        if self.debug_pseudo:
            record["pseudo_entropy_hist"] = entropy_histogram(pl.y_fused)
        return L.total_loss(p_main, p_aux, y, pl.y_fused, epoch, self.loss_cfg), record

    def run_epoch(self) -> List[dict]:
        epoch = self.epoch
        lr = self.lr_at(epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        records = []
        for it in range(self.tc.iterations_per_epoch):
            x, y = self.sample_batch()
            self.optimizer.zero_grad(set_to_none=True)
            terms, extra = self.step_losses(x, y, epoch)
            terms["total"].backward()
            if self.tc.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.tc.grad_clip)
            self.optimizer.step()
            rec = {"stage": self.stage, "epoch": epoch, "iter": it, "lr": lr}
            rec.update(L.loss_values(terms))
            if self.stage == "segment":
                # the schedule value, not its float32 copy from the loss dict
                rec["lambda_p"] = self.lambda_at(epoch) if self.dual else 0.0
            rec.update(extra)
            records.append(rec)
        self._append_metrics(records)
        self.history.extend(records)
        self.epoch += 1
        return records

    def fit(self) -> Optional[Path]:
        """Train until the configured epoch count; returns the final checkpoint directory."""
        if self.epoch >= self.tc.epochs:
            log.info("%s: already at epoch %d, nothing to do", self.stage, self.epoch)
            return self.latest_checkpoint()
        last = None
        while self.epoch < self.tc.epochs:
            t0 = time.time()
            recs = self.run_epoch()
            mean = float(np.mean([r["total"] for r in recs]))
            log.info("%s epoch %d/%d loss %.4f (%.1fs)", self.stage, self.epoch, self.tc.epochs, mean, time.time() - t0)
            if self.on_epoch_end is not None:
                self.on_epoch_end(self)
            if self.epoch % self.tc.checkpoint_every == 0 or self.epoch == self.tc.epochs:
                last = self.save_checkpoint()
        return last

    # -- persistence

    def _append_metrics(self, records):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "metrics.jsonl", "a") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")

    def save_checkpoint(self) -> Path:
        path = self.ckpt_dir / f"{CKPT_PREFIX}{self.epoch}"
        path.mkdir(parents=True, exist_ok=True)
        state = {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "stage": self.stage,
            "dual": self.dual,
            "network": self.net_cfg.to_dict(),
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }
        torch.save(state, path / "model.pt")
        sidecar = {
            "stage": self.stage,
            "epoch": self.epoch,
            "epochs_total": self.tc.epochs,
            "dual": self.dual,
            "ablation": self.cfg.ablation,
            "network": self.net_cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "config": self.cfg.to_dict(),
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        with open(path / "checkpoint.json", "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
        (self.ckpt_dir / "latest").write_text(path.name + "\n")
        return path

    def latest_checkpoint(self) -> Optional[Path]:
        marker = self.ckpt_dir / "latest"
        return self.ckpt_dir / marker.read_text().strip() if marker.exists() else None

    def load_trunk(self, ckpt):
        """Initialise from a pretraining checkpoint: every weight except the output heads."""
        state = load_checkpoint(ckpt)
        other = NetworkConfig(**state["network"])
        diff = {k: v for k, v in self.net_cfg.diff(other).items() if k != "head_mode"}
        if diff:
            raise CheckpointError(f"init checkpoint network config differs: {diff}")
        own = self.model.state_dict()
        loaded = {
            k: v for k, v in state["model"].items() if k in own and ".head." not in k and not k.startswith("head.")
        }
        own.update(loaded)
        self.model.load_state_dict(own)
        log.info("initialised %d tensors from %s", len(loaded), ckpt)

    @classmethod
    def resume(cls, cfg: ExperimentConfig, stage: str, cases, out_dir, checkpoint=None, **kwargs) -> "Trainer":
        """Rebuild a trainer from a checkpoint (default: the ``latest`` one under ``out_dir``)."""
        out_dir = Path(out_dir)
        if checkpoint is None:
            marker = out_dir / "checkpoints" / "latest"
            if not marker.exists():
                raise CheckpointError(f"no checkpoint to resume under {out_dir}")
            checkpoint = out_dir / "checkpoints" / marker.read_text().strip()
        state = load_checkpoint(checkpoint)
        if state["stage"] != stage:
            raise CheckpointError(f"stage mismatch: checkpoint is {state['stage']!r}, config asks {stage!r}")
        expected = stage_network_config(cfg, stage)
        diff = expected.diff(NetworkConfig(**state["network"]))
        if diff:
            raise CheckpointError(f"network config mismatch (config vs checkpoint): {diff}")
        trainer = cls(cfg, stage, cases, out_dir, require_init=False, **kwargs)
        trainer.model.load_state_dict(state["model"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.epoch = int(state["epoch"])
        trainer.rng.bit_generator.state = state["numpy_rng"]
        torch.set_rng_state(state["torch_rng"])
        return trainer


def load_checkpoint(path) -> dict:
    """Load ``model.pt`` from a checkpoint directory (or the file itself)."""
    path = Path(path)
    if path.is_dir():
        path = path / "model.pt"
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    for key in ("model", "stage", "network", "epoch"):
        if key not in state:
            raise CheckpointError(f"corrupt checkpoint {path}: missing {key!r}")
    return state


def load_model(path, stage: Optional[str] = "segment") -> DualBranchNet:
    state = load_checkpoint(path)
    if stage is not None and state["stage"] != stage:
        raise CheckpointError(f"expected a {stage!r} checkpoint, got {state['stage']!r}")
    model = build_network(NetworkConfig(**state["network"]), dual=state.get("dual", True))
    model.load_state_dict(state["model"])
    model.eval()
    return model


def pretrain(cfg: ExperimentConfig, cases, out_dir, **kwargs) -> Path:
    return Trainer(cfg, "pretrain", cases, out_dir, **kwargs).fit()


def train_segmentation(cfg: ExperimentConfig, cases, out_dir, init_checkpoint=None, **kwargs) -> Path:
    return Trainer(cfg, "segment", cases, out_dir, init_checkpoint=init_checkpoint, **kwargs).fit()


def read_metrics(path) -> List[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
