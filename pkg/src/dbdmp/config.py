"""Experiment configuration: one JSON file holding every stage's settings."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

from .corruption import CorruptionConfig
from .inference import PostprocessConfig
from .losses import LossConfig
from .network import NetworkConfig
from .volumes import SyntheticSpec


class ConfigError(ValueError):
    pass


# ablation rows: network, supervised terms, pseudo-label term, pretrained init
ABLATIONS = {
    "baseline": dict(dual=False, sup_terms=("ce",), pseudo_term="none", pretrained=False),
    "a": dict(dual=True, sup_terms=("ce",), pseudo_term="dice", pretrained=False),
    "b": dict(dual=True, sup_terms=("ce", "tversky"), pseudo_term="dice", pretrained=False),
    "c": dict(dual=True, sup_terms=("ce", "tversky"), pseudo_term="klce", pretrained=False),
    "d": dict(dual=True, sup_terms=("sce", "tversky"), pseudo_term="klce", pretrained=False),
    "e": dict(dual=True, sup_terms=("pce", "tversky"), pseudo_term="klce", pretrained=False),
    "f": dict(dual=True, sup_terms=("pce", "sce", "tversky"), pseudo_term="klce", pretrained=False),
    "g": dict(dual=True, sup_terms=("pce", "sce", "tversky"), pseudo_term="klce", pretrained=True),
}

# hyper-parameter grids for the sensitivity sweeps
SWEEPS = {
    "tau": (0.1, 0.2, 0.3, 0.4),
    "gamma": (0.6, 0.8, 1.0, 1.2),
    "alpha": (0.3, 0.4, 0.5, 0.6),
    "lam": (1.4, 1.6, 1.8, 2.0, 2.2),
}


@dataclass
class TrainConfig:
    stage: str = "segment"
    epochs: int = 300
    iterations_per_epoch: int = 250
    batch_size: int = 2
    patch_size: Tuple[int, int, int] = (224, 128, 64)
    initial_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 3e-5
    poly_exponent: float = 0.9
    nesterov: bool = True
    grad_clip: float = 12.0
    oversample_fg: float = 0.5
    seed: int = 0
    checkpoint_every: int = 50
    init_checkpoint: Optional[str] = None
    select_best: bool = False

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.stage not in ("pretrain", "segment"):
            raise ValueError(f"stage must be 'pretrain' or 'segment', got {self.stage!r}")
        if self.epochs < 1 or self.iterations_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, iterations_per_epoch and batch_size must be >= 1")
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be > 0, got {self.initial_lr}")
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ValueError(f"patch_size must be 3 positive ints, got {self.patch_size}")
        if not 0.0 <= self.oversample_fg <= 1.0:
            raise ValueError(f"oversample_fg must lie in [0, 1], got {self.oversample_fg}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


@dataclass
class DataConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_train: int = 40
    n_val: int = 10
    n_test: int = 0
    seed: int = 0
    target_spacing: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if self.n_val < 0 or self.n_test < 0:
            raise ValueError("n_val and n_test must be >= 0")


@dataclass
class InferenceConfig:
    step: float = 0.5
    weighting: str = "gaussian"

    def __post_init__(self):
        if not 0 < self.step <= 1:
            raise ValueError(f"step must lie in (0, 1], got {self.step}")
        if self.weighting not in ("uniform", "gaussian"):
            raise ValueError(f"weighting must be 'uniform' or 'gaussian', got {self.weighting!r}")


@dataclass
class ExperimentConfig:
    experiment_id: str = "dbdmp"
    profile: str = "paper"
    ablation: str = "g"
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    pretrain: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage="pretrain", epochs=1000, momentum=0.99)
    )
    segment: TrainConfig = field(default_factory=lambda: TrainConfig(stage="segment", epochs=300, momentum=0.9))
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {sorted(ABLATIONS)}, got {self.ablation!r}")
        if self.pretrain.stage != "pretrain" or self.segment.stage != "segment":
            raise ValueError("pretrain/segment sections must carry matching stage tags")
        divisor = 2 ** (self.network.levels - 1)
        for name in ("pretrain", "segment"):
            ps = getattr(self, name).patch_size
            bad = [a for a, p in enumerate(ps) if p % divisor]
            if bad:
                raise ValueError(f"{name}.patch_size {ps} not divisible by {divisor} on axes {bad}")
        self.corruption.check_patch(self.pretrain.patch_size)

    # -- ablation handling

    @property
    def preset(self) -> dict:
        return ABLATIONS[self.ablation]

    def with_ablation(self, name: str) -> "ExperimentConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        preset = ABLATIONS[name]
        d = self.to_dict()
        d["ablation"] = name
        d["loss"]["sup_terms"] = list(preset["sup_terms"])
        d["loss"]["pseudo_term"] = preset["pseudo_term"]
        return ExperimentConfig.from_dict(d)

    def with_overrides(self, assignments) -> "ExperimentConfig":
        """Apply ``section.key=value`` strings (value parsed as JSON when possible)."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"override {key!r}: no section {p!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"override {key!r}: unknown field {parts[-1]!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)

    # -- serialisation

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return _build(cls, d, "")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d)


_NESTED = {
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "network"): NetworkConfig,
    (ExperimentConfig, "loss"): LossConfig,
    (ExperimentConfig, "corruption"): CorruptionConfig,
    (ExperimentConfig, "pretrain"): TrainConfig,
    (ExperimentConfig, "segment"): TrainConfig,
    (ExperimentConfig, "inference"): InferenceConfig,
    (ExperimentConfig, "postprocess"): PostprocessConfig,
    (DataConfig, "synthetic"): SyntheticSpec,
}

_TYPES = {bool: (bool,), int: (int,), float: (int, float), str: (str,)}


def _build(cls, d, where: str):
    """Strict dataclass construction: unknown keys and wrongly typed scalars are errors."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown fields {unknown}")
    kwargs = {}
    for name, value in d.items():
        path = f"{where}.{name}" if where else name
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, path)
            continue
        default = _default_of(known[name])
        if default is not None and value is not None and type(default) in _TYPES:
            ok = _TYPES[type(default)]
            if not isinstance(value, ok) or (type(default) is not bool and isinstance(value, bool)):
                raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _default_of(f):
    return None if f.default is MISSING else f.default


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def toy_config(**overrides) -> ExperimentConfig:
    """Desk-scale profile: small patches, 2 resolution levels, short schedules."""
    patch = (32, 32, 16)
    cfg = ExperimentConfig(
        experiment_id="toy",
        profile="toy",
        data=DataConfig(synthetic=SyntheticSpec(), n_train=40, n_val=10),
        network=NetworkConfig(levels=2, base_features=8),
        # ramp-up horizon scaled with the schedule (99 of 300 epochs -> 6 of 20)
        loss=LossConfig(t_max=6),
        corruption=CorruptionConfig(shuffle_repeats=300),
        pretrain=TrainConfig(
            stage="pretrain", epochs=20, iterations_per_epoch=20, patch_size=patch, momentum=0.99,
            checkpoint_every=5,
        ),
        segment=TrainConfig(
            stage="segment", epochs=20, iterations_per_epoch=20, patch_size=patch, momentum=0.9,
            checkpoint_every=5,
        ),
    )
    if overrides:
        d = cfg.to_dict()
        _deep_update(d, overrides)
        cfg = ExperimentConfig.from_dict(d)
    return cfg


def paper_config() -> ExperimentConfig:
    cfg = ExperimentConfig(experiment_id="paper", profile="paper")
    d = cfg.to_dict()
    d["data"]["synthetic"]["spacing"] = [3.0, 0.8, 0.8]
    d["data"]["target_spacing"] = [3.0, 0.8, 0.8]
    return ExperimentConfig.from_dict(d)


PROFILES = {"toy": toy_config, "paper": paper_config}


def _deep_update(base: dict, upd: dict):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = copy.deepcopy(v)
