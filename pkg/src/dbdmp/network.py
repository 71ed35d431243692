"""VNet-style encoder with a main decoder and a dropout-perturbed auxiliary decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

HEAD_MODES = ("segmentation", "reconstruction")
DROPOUT_SCOPES = ("bottleneck", "skips", "both")


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 2
    levels: int = 5
    base_features: int = 16
    max_features: int = 256
    dropout_rate: float = 0.5
    head_mode: str = "segmentation"
    aux_dropout_scope: str = "both"
    negative_slope: float = 0.01

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.aux_dropout_scope not in DROPOUT_SCOPES:
            raise ValueError(f"aux_dropout_scope must be one of {DROPOUT_SCOPES}, got {self.aux_dropout_scope!r}")
        if self.in_channels < 1 or self.base_features < 1:
            raise ValueError("in_channels and base_features must be >= 1")

    def features(self) -> List[int]:
        return [min(self.base_features * 2**k, self.max_features) for k in range(self.levels)]

    @property
    def out_channels(self) -> int:
        return self.num_classes if self.head_mode == "segmentation" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    def diff(self, other: "NetworkConfig") -> dict:
        """Fields that differ, as ``{name: (self value, other value)}``."""
        return {
            f.name: (getattr(self, f.name), getattr(other, f.name))
            for f in fields(self)
            if getattr(self, f.name) != getattr(other, f.name)
        }


class FeatureBundle(NamedTuple):
    skips: Tuple[torch.Tensor, ...]  # one per level above the bottleneck, finest first
    bottleneck: torch.Tensor


class ProbabilityPair(NamedTuple):
    p_main: torch.Tensor
    p_aux: torch.Tensor


class ResBlock(nn.Module):
    """Two 3x3x3 conv + InstanceNorm layers with a residual connection and LeakyReLU."""

    def __init__(self, cin: int, cout: int, slope: float = 0.01):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm1 = nn.InstanceNorm3d(cout, affine=True)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(cout, affine=True)
        self.skip = nn.Identity() if cin == cout else nn.Conv3d(cin, cout, 1)
        self.slope = slope

    def forward(self, x):
        h = F.leaky_relu(self.norm1(self.conv1(x)), self.slope)
        h = self.norm2(self.conv2(h))
        return F.leaky_relu(h + self.skip(x), self.slope)


class Down(nn.Module):
    def __init__(self, cin: int, cout: int, slope: float):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, stride=2, padding=1)
        self.norm = nn.InstanceNorm3d(cout, affine=True)
        self.slope = slope

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), self.slope)


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        feats = cfg.features()
        s = cfg.negative_slope
        self.stem = ResBlock(cfg.in_channels, feats[0], s)
        self.downs = nn.ModuleList(Down(feats[k - 1], feats[k], s) for k in range(1, cfg.levels))
        self.blocks = nn.ModuleList(ResBlock(feats[k], feats[k], s) for k in range(1, cfg.levels))
        self.divisor = 2 ** (cfg.levels - 1)

    def forward(self, x: torch.Tensor) -> FeatureBundle:
        if x.dim() != 5:
            raise ValueError(f"expected input (B, C, D, H, W), got shape {tuple(x.shape)}")
        for axis, name in zip(range(2, 5), ("D", "H", "W")):
            if x.shape[axis] % self.divisor:
                raise ValueError(
                    f"spatial axis {name} of size {x.shape[axis]} is not divisible by {self.divisor}"
                )
        h = self.stem(x)
        skips = [h]
        for down, block in zip(self.downs, self.blocks):
            h = block(down(h))
            skips.append(h)
        return FeatureBundle(tuple(skips[:-1]), skips[-1])


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        feats = cfg.features()
        s = cfg.negative_slope
        self.ups = nn.ModuleList(
            nn.ConvTranspose3d(feats[k + 1], feats[k], 2, stride=2) for k in reversed(range(cfg.levels - 1))
        )
        self.blocks = nn.ModuleList(
            ResBlock(2 * feats[k], feats[k], s) for k in reversed(range(cfg.levels - 1))
        )
        self.head = nn.Conv3d(feats[0], cfg.out_channels, 1)
        self.head_mode = cfg.head_mode

    def logits(self, f: FeatureBundle) -> torch.Tensor:
        h = f.bottleneck
        for up, block, skip in zip(self.ups, self.blocks, reversed(f.skips)):
            h = block(torch.cat([up(h), skip], dim=1))
        return self.head(h)

    def forward(self, f: FeatureBundle) -> torch.Tensor:
        out = self.logits(f)
        if self.head_mode == "segmentation":
            return torch.softmax(out, dim=1)
        return out

    def reset_head(self, cfg: NetworkConfig):
        self.head = nn.Conv3d(self.head.in_channels, cfg.out_channels, 1).to(self.head.weight.device)
        self.head_mode = cfg.head_mode


def perturb(f: FeatureBundle, rate: float, scope: str, training: bool) -> FeatureBundle:
    """Element-wise dropout on the bottleneck and/or every skip feature."""
    if rate == 0.0 or not training:
        return f
    skips = f.skips
    bottleneck = f.bottleneck
    if scope in ("skips", "both"):
        skips = tuple(F.dropout(s, rate, training=True) for s in skips)
    if scope in ("bottleneck", "both"):
        bottleneck = F.dropout(bottleneck, rate, training=True)
    return FeatureBundle(skips, bottleneck)


class DualBranchNet(nn.Module):
    """Shared encoder, main decoder on clean features, auxiliary decoder on dropped-out features."""

    dual = True

    def __init__(self, cfg: Optional[NetworkConfig] = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        self.encoder = Encoder(self.cfg)
        self.main = Decoder(self.cfg)
        self.aux = Decoder(self.cfg)

    def encode(self, x: torch.Tensor) -> FeatureBundle:
        return self.encoder(x)

    def decode_main(self, f: FeatureBundle) -> torch.Tensor:
        return self.main(f)

    def decode_aux(self, f: FeatureBundle) -> torch.Tensor:
        return self.aux(perturb(f, self.cfg.dropout_rate, self.cfg.aux_dropout_scope, self.training))

    def forward(self, x: torch.Tensor) -> ProbabilityPair:
        f = self.encode(x)
        return ProbabilityPair(self.decode_main(f), self.decode_aux(f))

    def forward_main(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_main(self.encode(x))

    def set_head_mode(self, head_mode: str):
        """Switch head type, re-initialising only the final 1x1 convolutions."""
        self.cfg = NetworkConfig(**{**self.cfg.to_dict(), "head_mode": head_mode})
        for dec in self.decoders():
            dec.reset_head(self.cfg)

    def decoders(self):
        return [self.main, self.aux]


class SingleBranchNet(DualBranchNet):
    """Baseline: same encoder/decoder design with the main decoder only."""

    dual = False

    def __init__(self, cfg: Optional[NetworkConfig] = None):
        nn.Module.__init__(self)
        self.cfg = cfg or NetworkConfig()
        self.encoder = Encoder(self.cfg)
        self.main = Decoder(self.cfg)

    def decode_aux(self, f):
        raise RuntimeError("single-branch network has no auxiliary decoder")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_main(x)

    def decoders(self):
        return [self.main]


def build_network(cfg: NetworkConfig, dual: bool = True) -> DualBranchNet:
    return DualBranchNet(cfg) if dual else SingleBranchNet(cfg)


def build_baseline(cfg: NetworkConfig) -> SingleBranchNet:
    return SingleBranchNet(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
