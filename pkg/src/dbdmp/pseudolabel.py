"""Online pseudo labels: mix the two decoders, sharpen, then fuse with the partial annotation.

Channel axis is 1 throughout, so the functions work on ``(B, C, *spatial)`` maps
as well as on ``(N, C)`` batches of voxel vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch


@dataclass
class PseudoLabel:
    y_mix: torch.Tensor
    y_sharp: torch.Tensor
    y_fused: torch.Tensor
    theta: float


def mix(p_main: torch.Tensor, p_aux: torch.Tensor, theta: float) -> torch.Tensor:
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    if p_main.shape != p_aux.shape:
        raise ValueError(f"shape mismatch {tuple(p_main.shape)} vs {tuple(p_aux.shape)}")
    if theta == 1.0:
        return p_main.clone()
    if theta == 0.0:
        return p_aux.clone()
    # lerp = p_aux + theta (p_main - p_aux): identical inputs come back bit-exact
    return torch.lerp(p_aux, p_main, theta)


def sharpen(y_mix: torch.Tensor, tau: float, mode: str = "softmax") -> torch.Tensor:
    """Temperature sharpening over the channel axis.

    ``softmax``: exp(y_k / tau) / sum_j exp(y_j / tau), applied to the probabilities
    themselves. ``power``: y_k^(1/tau) / sum_j y_j^(1/tau).
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if mode == "softmax":
        return torch.softmax(y_mix / tau, dim=1)
    if mode == "power":
        powered = y_mix.clamp_min(0) ** (1.0 / tau)
        return powered / powered.sum(1, keepdim=True).clamp_min(torch.finfo(y_mix.dtype).tiny)
    raise ValueError(f"unknown sharpen mode {mode!r}")


def fuse(y_sharp: torch.Tensor, y_partial: torch.Tensor) -> torch.Tensor:
    """Foreground = y + (1 - y) * sharpened foreground; background is the complement."""
    if y_partial.dim() == y_sharp.dim():
        y_partial = y_partial[:, 0]
    y = y_partial.to(y_sharp.dtype)
    if y.shape != y_sharp.shape[:1] + y_sharp.shape[2:]:
        raise ValueError(f"partial label {tuple(y.shape)} does not match {tuple(y_sharp.shape)}")
    fg = y + (1.0 - y) * y_sharp[:, 1]
    # (1 - y) * bg equals 1 - fg for a normalised input and keeps y = 0 voxels bit-exact
    bg = (1.0 - y) * y_sharp[:, 0]
    return torch.stack([bg, fg], dim=1)


def build(
    p_main: torch.Tensor,
    p_aux: torch.Tensor,
    y_partial: torch.Tensor,
    tau: float,
    rng: Optional[np.random.Generator] = None,
    theta: Optional[float] = None,
    mode: str = "softmax",
) -> PseudoLabel:
    """Draw theta ~ U[0, 1] (unless given) and compose mix -> sharpen -> fuse.

    The result is a constant target: no gradient flows back into the decoders.
    """
    if theta is None:
        if rng is None:
            raise ValueError("either rng or theta must be given")
        theta = float(rng.uniform(0.0, 1.0))
    with torch.no_grad():
        y_mix = mix(p_main.detach(), p_aux.detach(), theta)
        y_sharp = sharpen(y_mix, tau, mode)
        y_fused = fuse(y_sharp, y_partial)
    return PseudoLabel(y_mix, y_sharp, y_fused, theta)


def entropy_histogram(y: torch.Tensor, bins: int = 10):
    """Histogram of per-voxel binary entropy (in bits) of a soft label map."""
    fg = y[:, 1].detach().double().clamp(0.0, 1.0)
    h = -(torch.special.xlogy(fg, fg) + torch.special.xlogy(1 - fg, 1 - fg)) / math.log(2)
    counts = torch.histc(h.clamp(0.0, 1.0), bins=bins, min=0.0, max=1.0)
    return [int(c) for c in counts]
