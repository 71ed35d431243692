"""Image corruptions for self-supervised restoration pretraining.

All transforms take and return float arrays with values in [0, 1] and draw
randomness only from the ``np.random.Generator`` they are given.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

RANGE_TOL = 1e-6
LUT_SIZE = 1024
_CURVE_SAMPLES = 8192


@dataclass
class CorruptionConfig:
    p_nonlinear: float = 0.9
    p_shuffle: float = 0.5
    p_paint: float = 0.9
    p_inpaint_given_paint: float = 0.8
    shuffle_window_max: Tuple[int, int, int] = (8, 8, 4)
    shuffle_repeats: int = 500
    paint_block_count_range: Tuple[int, int] = (1, 5)
    # block edge as a fraction of the patch edge, per axis
    paint_block_size_range: Tuple[Tuple[float, float], ...] = ((1 / 6, 1 / 3),) * 3
    outpaint_block_count_range: Tuple[int, int] = (1, 5)
    outpaint_block_size_range: Tuple[Tuple[float, float], ...] = ((3 / 7, 4 / 7),) * 3

    def __post_init__(self):
        self.shuffle_window_max = tuple(int(w) for w in self.shuffle_window_max)
        self.paint_block_count_range = tuple(int(c) for c in self.paint_block_count_range)
        self.outpaint_block_count_range = tuple(int(c) for c in self.outpaint_block_count_range)
        self.paint_block_size_range = tuple(tuple(float(f) for f in r) for r in self.paint_block_size_range)
        self.outpaint_block_size_range = tuple(
            tuple(float(f) for f in r) for r in self.outpaint_block_size_range
        )
        for name in ("p_nonlinear", "p_shuffle", "p_paint", "p_inpaint_given_paint"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if len(self.shuffle_window_max) != 3 or min(self.shuffle_window_max) < 1:
            raise ValueError(f"shuffle_window_max must be 3 positive ints, got {self.shuffle_window_max}")
        if self.shuffle_repeats < 0:
            raise ValueError("shuffle_repeats must be >= 0")
        for name in ("paint_block_count_range", "outpaint_block_count_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= min <= max")
        for name in ("paint_block_size_range", "outpaint_block_size_range"):
            ranges = getattr(self, name)
            if len(ranges) != 3 or any(not (0 < lo <= hi <= 1) for lo, hi in ranges):
                raise ValueError(f"{name} must be 3 (min, max) fractions in (0, 1]")

    def check_patch(self, patch_size):
        too_big = [a for a, (w, p) in enumerate(zip(self.shuffle_window_max, patch_size)) if w >= p]
        if too_big:
            raise ValueError(
                f"shuffle_window_max {self.shuffle_window_max} must be smaller than patch {tuple(patch_size)} "
                f"(axes {too_big})"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _check_unit_range(x: np.ndarray):
    lo, hi = float(x.min()), float(x.max())
    if lo < -RANGE_TOL or hi > 1 + RANGE_TOL:
        raise ValueError(f"intensities must lie in [0, 1], got [{lo}, {hi}]")


def bezier_curve(points: np.ndarray, n: int = _CURVE_SAMPLES) -> Tuple[np.ndarray, np.ndarray]:
    """Sample a cubic Bezier curve given 4 control points (x, y)."""
    t = np.linspace(0.0, 1.0, n)
    b = np.stack([(1 - t) ** 3, 3 * (1 - t) ** 2 * t, 3 * (1 - t) * t**2, t**3])
    pts = np.asarray(points, dtype=np.float64)
    return b.T @ pts[:, 0], b.T @ pts[:, 1]


def bezier_lut(p1, p2, increasing: bool = True, size: int = LUT_SIZE) -> np.ndarray:
    """Tabulate the intensity map x -> y on ``size`` evenly spaced x values.

    With P0.x = 0 and P3.x = 1 and inner x coordinates in [0, 1] the curve's x(t)
    is non-decreasing, so t -> x is inverted by interpolation.
    """
    p0, p3 = ((0.0, 0.0), (1.0, 1.0)) if increasing else ((0.0, 1.0), (1.0, 0.0))
    xs, ys = bezier_curve(np.array([p0, p1, p2, p3]))
    grid = np.linspace(0.0, 1.0, size)
    return np.clip(np.interp(grid, xs, ys), 0.0, 1.0)


def apply_lut(x: np.ndarray, lut: np.ndarray) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, lut.size)
    return np.interp(np.clip(x, 0.0, 1.0), grid, lut).astype(x.dtype, copy=False)


def nonlinear_transform(x: np.ndarray, rng: np.random.Generator, control_points=None, increasing=None):
    """Voxel-wise Bezier intensity remapping.

    ``control_points`` = (P1, P2) and ``increasing`` override the random draw.
    """
    _check_unit_range(x)
    if control_points is None:
        p1, p2 = rng.random(2), rng.random(2)
    else:
        p1, p2 = control_points
    if increasing is None:
        increasing = bool(rng.random() >= 0.5)
    return apply_lut(x, bezier_lut(p1, p2, increasing))


def local_pixel_shuffle(x: np.ndarray, rng: np.random.Generator, cfg: CorruptionConfig) -> np.ndarray:
    """Permute voxel values inside random small windows, in place on a copy.

    Windows are shuffled sequentially, so the global intensity multiset is kept.
    """
    out = x.copy()
    shape = out.shape
    wmax = [min(w, s) for w, s in zip(cfg.shuffle_window_max, shape)]
    for _ in range(cfg.shuffle_repeats):
        size = [int(rng.integers(1, w + 1)) for w in wmax]
        start = [int(rng.integers(0, s - w + 1)) for s, w in zip(shape, size)]
        sl = tuple(slice(a, a + w) for a, w in zip(start, size))
        block = out[sl]
        out[sl] = rng.permutation(block.ravel()).reshape(block.shape)
    return out


def _random_blocks(shape, rng, count_range, size_range) -> List[Tuple[slice, ...]]:
    n = int(rng.integers(count_range[0], count_range[1] + 1))
    blocks = []
    for _ in range(n):
        sl = []
        for s, (lo, hi) in zip(shape, size_range):
            w = int(np.clip(round(rng.uniform(lo, hi) * s), 1, s))
            a = int(rng.integers(0, s - w + 1))
            sl.append(slice(a, a + w))
        blocks.append(tuple(sl))
    return blocks


def paint(x: np.ndarray, rng: np.random.Generator, cfg: CorruptionConfig, mode: str = "in"):
    """In- or out-painting with rectangular blocks and uniform [0, 1] noise.

    Returns ``(image, info)`` where ``info`` holds the mode, the block slices and
    the fraction of voxels replaced by noise.
    """
    if mode not in ("in", "out"):
        raise ValueError(f"mode must be 'in' or 'out', got {mode!r}")
    if mode == "in":
        blocks = _random_blocks(x.shape, rng, cfg.paint_block_count_range, cfg.paint_block_size_range)
    else:
        blocks = _random_blocks(x.shape, rng, cfg.outpaint_block_count_range, cfg.outpaint_block_size_range)
    inside = np.zeros(x.shape, dtype=bool)
    for sl in blocks:
        inside[sl] = True
    noisy = inside if mode == "in" else ~inside
    out = x.copy()
    out[noisy] = rng.random(int(noisy.sum())).astype(x.dtype, copy=False)
    return out, {"mode": mode, "blocks": blocks, "modified_fraction": float(noisy.mean())}


def compose_with_log(x: np.ndarray, rng: np.random.Generator, cfg: CorruptionConfig):
    """Like :func:`random_compose` but also returns the names of the applied transforms."""
    _check_unit_range(x)
    clean = x.copy()
    out = x.copy()
    applied = []
    if rng.random() < cfg.p_nonlinear:
        out = nonlinear_transform(out, rng)
        applied.append("nonlinear")
    if rng.random() < cfg.p_shuffle:
        out = local_pixel_shuffle(out, rng, cfg)
        applied.append("shuffle")
    if rng.random() < cfg.p_paint:
        mode = "in" if rng.random() < cfg.p_inpaint_given_paint else "out"
        out, _ = paint(out, rng, cfg, mode)
        applied.append(f"{mode}paint")
    return out, clean, applied


def random_compose(x: np.ndarray, rng: np.random.Generator, cfg: Optional[CorruptionConfig] = None):
    """Randomly composed corruption; returns ``(corrupted, clean_target)``."""
    out, clean, _ = compose_with_log(x, rng, cfg or CorruptionConfig())
    return out, clean


def rescale_unit(x: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant patches map to zeros."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        return np.zeros_like(x, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)
