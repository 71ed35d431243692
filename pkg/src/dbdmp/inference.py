"""Sliding-window prediction with the main decoder, and connected-component post-processing."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
from scipy import ndimage

from .volumes import CONNECTIVITY_26, LabelVolume, Volume, pad_to_shape


@dataclass
class SlidingWindowPlan:
    patch_size: Tuple[int, int, int]
    step: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    weighting: str = "gaussian"
    offsets: List[Tuple[int, int, int]] = field(default_factory=list)
    padded_shape: Optional[Tuple[int, int, int]] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("offsets")
        d.pop("padded_shape")
        return d


def window_starts(size: int, patch: int, step: float) -> List[int]:
    """Evenly spaced starts covering [0, size) with windows of ``patch`` voxels."""
    if patch >= size:
        return [0]
    n = int(np.ceil((size - patch) / (patch * step))) + 1
    return [int(round(i * (size - patch) / (n - 1))) for i in range(n)]


def make_plan(volume_shape, patch_size, step=0.5, weighting: str = "gaussian") -> SlidingWindowPlan:
    if weighting not in ("uniform", "gaussian"):
        raise ValueError(f"weighting must be 'uniform' or 'gaussian', got {weighting!r}")
    if np.isscalar(step):
        step = (float(step),) * 3
    if any(not 0 < s <= 1 for s in step):
        raise ValueError(f"step fractions must lie in (0, 1], got {step}")
    padded = tuple(max(n, p) for n, p in zip(volume_shape, patch_size))
    starts = [window_starts(n, p, s) for n, p, s in zip(padded, patch_size, step)]
    offsets = [(a, b, c) for a in starts[0] for b in starts[1] for c in starts[2]]
    return SlidingWindowPlan(tuple(patch_size), tuple(step), weighting, offsets, padded)


def gaussian_importance(patch_size, sigma_scale: float = 1.0 / 8) -> np.ndarray:
    centre = np.zeros(patch_size, dtype=np.float64)
    centre[tuple(p // 2 for p in patch_size)] = 1.0
    g = ndimage.gaussian_filter(centre, [p * sigma_scale for p in patch_size], mode="constant", cval=0)
    g = g / g.max()
    # keep every weight strictly positive so the accumulator never vanishes
    g[g == 0] = g[g > 0].min()
    return g.astype(np.float32)


@torch.no_grad()
def predict(volume: Volume, model, plan: Optional[SlidingWindowPlan] = None, patch_size=None) -> Volume:
    """Foreground probability map from the main decoder only."""
    if plan is None:
        if patch_size is None:
            raise ValueError("either plan or patch_size is required")
        plan = make_plan(volume.shape, patch_size)
    was_training = model.training
    model.eval()
    data, lead = pad_to_shape(volume.data.astype(np.float32), plan.patch_size)
    if plan.padded_shape is not None and tuple(plan.padded_shape) != data.shape:
        raise ValueError(f"plan was built for padded shape {plan.padded_shape}, volume pads to {data.shape}")
    weight = (
        gaussian_importance(plan.patch_size)
        if plan.weighting == "gaussian"
        else np.ones(plan.patch_size, dtype=np.float32)
    )
    acc = np.zeros(data.shape, dtype=np.float64)
    norm = np.zeros(data.shape, dtype=np.float64)
    x = torch.from_numpy(data)
    for off in plan.offsets:
        sl = tuple(slice(o, o + p) for o, p in zip(off, plan.patch_size))
        prob = model.forward_main(x[sl][None, None])[0, 1].numpy()
        acc[sl] += weight * prob
        norm[sl] += weight
    if was_training:
        model.train()
    out = acc / norm
    crop = tuple(slice(l, l + n) for l, n in zip(lead, volume.shape))
    out = np.clip(out[crop], 0.0, 1.0).astype(np.float32)
    return Volume(out, volume.spacing, volume.origin, {"kind": "probability"})


@dataclass
class PostprocessConfig:
    threshold: float = 0.5
    remove_border_components: bool = False
    min_volume_mm3: float = 0.0
    intensity_window: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.min_volume_mm3 < 0:
            raise ValueError(f"min_volume_mm3 must be >= 0, got {self.min_volume_mm3}")
        if self.intensity_window is not None:
            lo, hi = self.intensity_window
            if not lo < hi:
                raise ValueError(f"intensity_window needs low < high, got {self.intensity_window}")
            self.intensity_window = (float(lo), float(hi))

    def to_dict(self) -> dict:
        return asdict(self)


def binarize_and_postprocess(prob: Volume, image: Optional[Volume], cfg: PostprocessConfig) -> LabelVolume:
    """Threshold, then drop 26-connected components at the border, too small, or outside the intensity window."""
    mask = np.asarray(prob.data) >= cfg.threshold
    labels, n = ndimage.label(mask, structure=CONNECTIVITY_26)
    keep = np.zeros(n + 1, dtype=bool)
    if n:
        idx = np.arange(1, n + 1)
        keep[1:] = True
        if cfg.remove_border_components:
            border = np.zeros(mask.shape, dtype=bool)
            for axis in range(3):
                border[(slice(None),) * axis + (0,)] = True
                border[(slice(None),) * axis + (-1,)] = True
            keep[np.unique(labels[border & mask])] = False
        if cfg.min_volume_mm3 > 0:
            sizes = ndimage.sum_labels(mask, labels, idx) * prob.voxel_volume
            keep[1:] &= sizes >= cfg.min_volume_mm3
        if cfg.intensity_window is not None:
            if image is None:
                raise ValueError("intensity filtering needs the image")
            means = ndimage.mean(image.data, labels, idx)
            lo, hi = cfg.intensity_window
            keep[1:] &= (means >= lo) & (means <= hi)
        keep[0] = False
    out = keep[labels]
    return LabelVolume(out.astype(np.uint8), prob.spacing, prob.origin)
