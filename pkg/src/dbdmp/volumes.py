"""Volumes, synthetic cases, preprocessing, patch sampling and the on-disk case format."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

Triple = Tuple[float, float, float]

NORMALIZE_EPS = 1e-8
CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


def _as_triple(values, name: str, positive: bool = False) -> Tuple[float, float, float]:
    values = tuple(float(v) for v in values)
    if len(values) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(values)}")
    if positive and any(v <= 0 for v in values):
        raise ValueError(f"{name} components must be > 0, got {values}")
    return values


@dataclass
class Volume:
    """Dense 3D scalar image with (z, y, x) spacing and origin in mm."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3D with every dim >= 1, got shape {self.data.shape}")
        self.spacing = _as_triple(self.spacing, "spacing", positive=True)
        self.origin = _as_triple(self.origin, "origin")
        self._check_values()

    def _check_values(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data contains NaN or Inf")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))


@dataclass
class LabelVolume(Volume):
    """Binary label map (0 background, 1 lymph node) on the same grid as a Volume."""

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(np.uint8, copy=False)
        super().__post_init__()

    def _check_values(self):
        if self.data.size and self.data.max() > 1:
            raise ValueError("label values must be in {0, 1}")


@dataclass
class Instance:
    instance_id: int
    voxels: np.ndarray  # (n, 3) integer coordinates
    mean_intensity: float
    volume_mm3: float

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "n_voxels": int(len(self.voxels)),
            "mean_intensity": self.mean_intensity,
            "volume_mm3": self.volume_mm3,
        }


@dataclass
class InstanceSet:
    instances: list

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def ids(self):
        return [inst.instance_id for inst in self.instances]


@dataclass
class Patch:
    image: np.ndarray
    label: Optional[np.ndarray]
    source_offset: Tuple[int, int, int]


# --------------------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    """Generator parameters for one synthetic partially-annotated case.

    Lengths are in mm, intensities in arbitrary CT-like units.
    """

    shape: Tuple[int, int, int] = (32, 64, 64)
    spacing: Triple = (1.0, 1.0, 1.0)
    instance_count: Tuple[int, int] = (4, 8)
    radius_mm: Tuple[float, float] = (2.5, 5.0)
    fg_mean: float = 100.0
    bg_mean: float = 0.0
    noise_std: float = 25.0
    texture_std: float = 30.0
    texture_sigma_mm: float = 3.0
    instance_intensity_jitter: float = 10.0
    annotated_fraction: float = 0.3
    selection: str = "random"  # or "largest"
    max_placement_attempts: int = 200

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = _as_triple(self.spacing, "spacing", positive=True)
        self.instance_count = tuple(int(c) for c in self.instance_count)
        self.radius_mm = tuple(float(r) for r in self.radius_mm)
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"shape must be 3 positive ints, got {self.shape}")
        lo, hi = self.instance_count
        if lo < 1 or hi < lo:
            raise ValueError(f"instance_count must satisfy 1 <= min <= max, got {self.instance_count}")
        if not (0 < self.radius_mm[0] <= self.radius_mm[1]):
            raise ValueError(f"radius_mm must satisfy 0 < min <= max, got {self.radius_mm}")
        if not (0.0 < self.annotated_fraction <= 1.0):
            raise ValueError(f"annotated_fraction must lie in (0, 1], got {self.annotated_fraction}")
        if self.selection not in ("random", "largest"):
            raise ValueError(f"selection must be 'random' or 'largest', got {self.selection!r}")
        if self.noise_std < 0 or self.texture_std < 0:
            raise ValueError("noise levels must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)


class PlacementError(RuntimeError):
    pass


def annotated_count(n_instances: int, fraction: float) -> int:
    return max(1, min(n_instances, int(math.floor(fraction * n_instances))))


def _ellipsoid_mask(shape, center, radii_vox) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    r = ((zz - center[0]) / radii_vox[0]) ** 2 + ((yy - center[1]) / radii_vox[1]) ** 2 + (
        (xx - center[2]) / radii_vox[2]
    ) ** 2
    return r <= 1.0


def generate_synthetic_case(seed: int, spec: SyntheticSpec):
    """Return (image, full label, partial label, instances) for a seeded synthetic case.

    Instances are ellipsoids separated by at least one background voxel, so each
    one is its own 26-connected component.
    """
    rng = np.random.default_rng(seed)
    shape = spec.shape
    spacing = np.asarray(spec.spacing)

    n = int(rng.integers(spec.instance_count[0], spec.instance_count[1] + 1))
    occupied = np.zeros(shape, dtype=bool)
    masks = []
    for _ in range(n):
        for _attempt in range(spec.max_placement_attempts):
            radii_vox = rng.uniform(spec.radius_mm[0], spec.radius_mm[1], size=3) / spacing
            radii_vox = np.maximum(radii_vox, 0.5)
            lo = np.ceil(radii_vox).astype(int) + 1
            hi = np.asarray(shape) - lo - 1
            if np.any(hi < lo):
                continue
            center = np.array([rng.integers(lo[a], hi[a] + 1) for a in range(3)])
            mask = _ellipsoid_mask(shape, center, radii_vox)
            if not mask.any():
                continue
            # one-voxel gap keeps instances from merging under 26-connectivity
            if (ndimage.binary_dilation(mask, CONNECTIVITY_26) & occupied).any():
                continue
            occupied |= mask
            masks.append(mask)
            break
        else:
            raise PlacementError(
                f"could not place instance {len(masks) + 1}/{n} without overlap after "
                f"{spec.max_placement_attempts} attempts"
            )

    texture = ndimage.gaussian_filter(
        rng.standard_normal(shape), sigma=spec.texture_sigma_mm / spacing, mode="reflect"
    )
    texture_scale = texture.std()
    if texture_scale > 0:
        texture = texture / texture_scale
    image = spec.bg_mean + spec.texture_std * texture

    instances = []
    voxel_mm3 = float(np.prod(spacing))
    for idx, mask in enumerate(masks):
        level = spec.fg_mean + rng.uniform(-1.0, 1.0) * spec.instance_intensity_jitter
        image[mask] = level + 0.3 * spec.texture_std * texture[mask]
    image = image + spec.noise_std * rng.standard_normal(shape)
    image = image.astype(np.float32)

    full = np.zeros(shape, dtype=np.uint8)
    for idx, mask in enumerate(masks):
        full[mask] = 1
        coords = np.argwhere(mask)
        instances.append(
            Instance(
                instance_id=idx + 1,
                voxels=coords,
                mean_intensity=float(image[mask].mean()),
                volume_mm3=float(len(coords) * voxel_mm3),
            )
        )

    k = annotated_count(len(masks), spec.annotated_fraction)
    if spec.selection == "largest":
        order = sorted(range(len(masks)), key=lambda i: (-len(instances[i].voxels), i))
        chosen = sorted(order[:k])
    else:
        chosen = sorted(int(i) for i in rng.choice(len(masks), size=k, replace=False))
    partial = np.zeros(shape, dtype=np.uint8)
    for i in chosen:
        partial[masks[i]] = 1

    geometry = dict(spacing=spec.spacing, origin=(0.0, 0.0, 0.0))
    img = Volume(image, **geometry, meta={"seed": seed, "annotated_instances": [i + 1 for i in chosen]})
    return img, LabelVolume(full, **geometry), LabelVolume(partial, **geometry), InstanceSet(instances)


# --------------------------------------------------------------------------- preprocessing


def _resampled_shape(shape, spacing, target_spacing):
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target_spacing))


def resample_array(data: np.ndarray, out_shape, order: int) -> np.ndarray:
    if tuple(out_shape) == data.shape:
        return data.copy()
    # align first and last voxel centres, which makes the identity and constant cases exact
    axes = []
    for n_in, n_out in zip(data.shape, out_shape):
        if n_out == 1:
            axes.append(np.array([(n_in - 1) / 2.0]))
        else:
            axes.append(np.linspace(0.0, n_in - 1, n_out))
    coords = np.meshgrid(*axes, indexing="ij")
    return ndimage.map_coordinates(data, coords, order=order, mode="nearest")


def resample(v: Volume, target_spacing) -> Volume:
    """Trilinear resampling to ``target_spacing``.

    The output spacing is the effective one (physical extent / new shape) so that
    resampling back to the original spacing reproduces the original shape.
    """
    target = _as_triple(target_spacing, "target_spacing", positive=True)
    out_shape = _resampled_shape(v.shape, v.spacing, target)
    data = resample_array(v.data.astype(np.float64), out_shape, order=1).astype(v.data.dtype)
    return Volume(data, _effective_spacing(v, out_shape, target), v.origin, dict(v.meta))


def resample_label(y: LabelVolume, target_spacing) -> LabelVolume:
    target = _as_triple(target_spacing, "target_spacing", positive=True)
    out_shape = _resampled_shape(y.shape, y.spacing, target)
    data = resample_array(y.data, out_shape, order=0)
    return LabelVolume(data, _effective_spacing(y, out_shape, target), y.origin, dict(y.meta))


def _effective_spacing(v: Volume, out_shape, target) -> Triple:
    return tuple(
        t if n_out == n_in and s == t else s * n_in / n_out
        for n_in, n_out, s, t in zip(v.shape, out_shape, v.spacing, target)
    )


def normalize(v: Volume) -> Volume:
    """Zero-mean, unit-variance intensities; constant input gives zeros and ``meta['degenerate']``."""
    if v.data.size < 2:
        raise ValueError("normalize needs more than one voxel")
    data = v.data.astype(np.float64)
    mean = data.mean()
    std = data.std()
    degenerate = bool(std < NORMALIZE_EPS)
    out = (data - mean) / max(std, NORMALIZE_EPS)
    meta = dict(v.meta, degenerate=degenerate, norm_mean=float(mean), norm_std=float(std))
    return Volume(out.astype(np.float32), v.spacing, v.origin, meta)


def crop_by_threshold(v: Volume, threshold: float = -300.0, margin: int = 0):
    """Crop to the bounding box of voxels above ``threshold``.

    Stand-in for the intensity-based lung-region crop. Returns the cropped volume
    and the slices used; an empty selection returns the input unchanged.
    """
    mask = v.data > threshold
    if not mask.any():
        return v, tuple(slice(0, n) for n in v.shape)
    coords = np.argwhere(mask)
    lo = np.maximum(coords.min(0) - margin, 0)
    hi = np.minimum(coords.max(0) + 1 + margin, v.shape)
    sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    origin = tuple(o + int(a) * s for o, a, s in zip(v.origin, lo, v.spacing))
    return Volume(v.data[sl].copy(), v.spacing, origin, dict(v.meta)), sl


def pad_to_shape(data: np.ndarray, min_shape) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    """Edge-replicate pad symmetrically so every axis reaches ``min_shape``.

    Returns the padded array and the leading pad per axis.
    """
    pads = []
    for n, m in zip(data.shape, min_shape):
        extra = max(0, int(m) - n)
        pads.append((extra // 2, extra - extra // 2))
    if not any(a or b for a, b in pads):
        return data, (0, 0, 0)
    return np.pad(data, pads, mode="edge"), tuple(p[0] for p in pads)


def sample_patch(
    v: Volume,
    y: Optional[LabelVolume],
    rng: np.random.Generator,
    patch_size,
    oversample_fg: float = 0.5,
) -> Patch:
    """Cut one training patch.

    With probability ``oversample_fg`` the patch is centred on a random labelled
    voxel (when the label has any foreground); otherwise the offset is uniform.
    Offsets refer to the edge-padded volume.
    """
    patch_size = tuple(int(p) for p in patch_size)
    image, _ = pad_to_shape(v.data, patch_size)
    label = None
    if y is not None:
        if y.shape != v.shape:
            raise ValueError(f"label shape {y.shape} differs from image shape {v.shape}")
        label, _ = pad_to_shape(y.data, patch_size)

    max_offset = [n - p for n, p in zip(image.shape, patch_size)]
    use_fg = rng.random() < oversample_fg
    offset = None
    if use_fg and label is not None:
        fg = np.flatnonzero(label)
        if fg.size:
            centre = np.unravel_index(fg[rng.integers(fg.size)], label.shape)
            offset = tuple(int(min(max(c - p // 2, 0), m)) for c, p, m in zip(centre, patch_size, max_offset))
    if offset is None:
        offset = tuple(int(rng.integers(0, m + 1)) for m in max_offset)

    sl = tuple(slice(o, o + p) for o, p in zip(offset, patch_size))
    return Patch(image[sl].copy(), None if label is None else label[sl].copy(), offset)


# --------------------------------------------------------------------------- on-disk format

RAW_DTYPES = {"float32": "<f4", "uint8": "u1"}


def _write_raw(path: Path, data: np.ndarray, dtype: str):
    np.ascontiguousarray(data, dtype=np.dtype(RAW_DTYPES[dtype])).tofile(path)


def _read_raw(path: Path, shape, dtype: str) -> np.ndarray:
    data = np.fromfile(path, dtype=np.dtype(RAW_DTYPES[dtype]))
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} values for shape {tuple(shape)}, found {data.size}")
    return data.reshape(shape)


def save_case(
    case_dir,
    image: Volume,
    full: Optional[LabelVolume] = None,
    partial: Optional[LabelVolume] = None,
    instances: Optional[InstanceSet] = None,
    generation_spec: Optional[dict] = None,
    extra_meta: Optional[dict] = None,
) -> Path:
    """Write a case directory: ``image.raw``, optional label raws and ``meta.json``."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    _write_raw(case_dir / "image.raw", image.data, "float32")
    files = {"image": "image.raw"}
    for name, lab in (("label_full", full), ("label_partial", partial)):
        if lab is not None:
            if lab.shape != image.shape:
                raise ValueError(f"{name} shape {lab.shape} differs from image shape {image.shape}")
            _write_raw(case_dir / f"{name}.raw", lab.data, "uint8")
            files[name] = f"{name}.raw"
    meta = {
        "shape": list(image.shape),
        "spacing": list(image.spacing),
        "origin": list(image.origin),
        "dtype": {"image": "float32", "label": "uint8"},
        "byte_order": "little",
        "index_order": "z*(H*W) + y*W + x",
        "files": files,
        "generation_spec": generation_spec,
    }
    if instances is not None:
        meta["instances"] = [inst.to_json() for inst in instances]
    if image.meta.get("annotated_instances") is not None:
        meta["annotated_instances"] = image.meta["annotated_instances"]
    if extra_meta:
        meta.update(extra_meta)
    with open(case_dir / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return case_dir


def load_case(case_dir) -> dict:
    """Read a case directory back into ``{'image', 'label_full', 'label_partial', 'meta'}``."""
    case_dir = Path(case_dir)
    meta_path = case_dir / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing {meta_path}")
    with open(meta_path) as f:
        meta = json.load(f)
    shape = tuple(meta["shape"])
    geometry = dict(spacing=tuple(meta["spacing"]), origin=tuple(meta["origin"]))
    out = {"meta": meta, "label_full": None, "label_partial": None}
    out["image"] = Volume(_read_raw(case_dir / "image.raw", shape, "float32"), **geometry)
    for name in ("label_full", "label_partial"):
        path = case_dir / f"{name}.raw"
        if path.exists():
            out[name] = LabelVolume(_read_raw(path, shape, "uint8"), **geometry)
    return out


def write_manifest(root, splits: dict, extra: Optional[dict] = None) -> Path:
    """Write ``dataset.json`` with case ids and their split (train/val/test)."""
    root = Path(root)
    for split in splits:
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
    manifest = {
        "cases": [{"id": cid, "split": split} for split, ids in splits.items() for cid in ids],
        "splits": {k: list(v) for k, v in splits.items()},
    }
    if extra:
        manifest.update(extra)
    path = root / "dataset.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def read_manifest(root) -> dict:
    path = Path(root) / "dataset.json"
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    with open(path) as f:
        manifest = json.load(f)
    manifest.setdefault("splits", {})
    return manifest


def data_root(default=None) -> Optional[Path]:
    """Dataset root, overridable through the ``DBDMP_DATA_ROOT`` environment variable."""
    env = os.environ.get("DBDMP_DATA_ROOT")
    if env:
        return Path(env)
    return None if default is None else Path(default)


def read_nifti(path, label: bool = False) -> Volume:
    """Read a (gzipped) NIfTI file into a Volume, reordering axes to (z, y, x)."""
    try:
        import nibabel as nib
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ImportError("NIfTI ingestion needs nibabel: pip install 'artifact[nifti]'") from exc
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    if data.ndim != 3:
        raise ValueError(f"{path}: expected a 3D image, got {data.ndim}D")
    zooms = img.header.get_zooms()[:3]
    affine = img.affine
    data = np.transpose(data, (2, 1, 0))
    spacing = (float(zooms[2]), float(zooms[1]), float(zooms[0]))
    origin = (float(affine[2, 3]), float(affine[1, 3]), float(affine[0, 3]))
    if label:
        return LabelVolume((data > 0).astype(np.uint8), spacing, origin)
    return Volume(data.astype(np.float32), spacing, origin)


def case_ids(prefix: str, n: int, start: int = 0) -> Sequence[str]:
    return [f"{prefix}_{i:03d}" for i in range(start, start + n)]
