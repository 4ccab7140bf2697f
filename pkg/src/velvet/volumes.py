"""Scan ingestion, filtering, resampling, and sub-volume augmentation.

Volumes travel as [1, D, H, W] float tensors with intensities min-max
normalized to [0, 1]. The on-disk container is one directory per scan with
``meta.json`` ({id, shape [S, H, W], dtype "f32"}) and ``volume.raw``
(little-endian float32, z-major then y then x).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CropLargerThanVolume, RejectedRecord

MIN_SLICES = 48


@dataclass
class VolumeRecord:
    """Raw scan: a stack of equally sized grayscale slices along z."""

    id: str
    slices: np.ndarray  # [S, H, W] float32

    def __post_init__(self):
        if self.slices.ndim != 3:
            raise ValueError(f"record {self.id!r}: want [S, H, W], got {self.slices.shape}")


@dataclass
class Volume:
    """Preprocessed cubic scan, normalized to [0, 1]."""

    id: str
    data: torch.Tensor  # [1, size, size, size] float32


@dataclass(frozen=True)
class AugmentConfig:
    crop_size: int = 64
    intensity_shift: float = 0.1
    intensity_scale: float = 0.1
    flip_prob: float = 0.5


def filter_record(rec: VolumeRecord, min_slices: int = MIN_SLICES,
                  excluded: set[str] | None = None) -> tuple[bool, str | None]:
    """Accept/reject a raw record; returns (accepted, reason)."""
    if excluded and rec.id in excluded:
        return False, "excluded"
    if rec.slices.shape[0] < min_slices:
        return False, "too_few_slices"
    return True, None


def z_sample_indices(num_slices: int, target: int) -> np.ndarray:
    """Evenly spaced slice indices: round(linspace(0, S-1, target))."""
    return np.round(np.linspace(0, num_slices - 1, target)).astype(np.int64)


def z_upsample_x2(slices: np.ndarray) -> np.ndarray:
    """Double the slice count by linear interpolation (endpoints preserved)."""
    s = slices.shape[0]
    if s == 1:
        return np.repeat(slices, 2, axis=0)
    pos = np.linspace(0.0, s - 1.0, 2 * s)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, s - 1)
    frac = (pos - lo).astype(slices.dtype).reshape(-1, 1, 1)
    return slices[lo] * (1.0 - frac) + slices[hi] * frac


def resample_to_volume(rec: VolumeRecord, size: int = 96,
                       min_slices: int = MIN_SLICES) -> Volume:
    """Resample an accepted record into a normalized cube.

    Scans at or above the target depth keep slices at the evenly spaced
    indices; shallower accepted scans are first linearly upsampled along z
    by a factor of 2. x/y are resized bilinearly; intensities are min-max
    normalized per volume (constant volumes map to 0).
    """
    ok, reason = filter_record(rec, min_slices=min_slices)
    if not ok:
        raise RejectedRecord(f"record {rec.id!r}: {reason}")
    arr = np.ascontiguousarray(rec.slices, dtype=np.float32)
    if arr.shape[0] < size:
        arr = z_upsample_x2(arr)
    arr = arr[z_sample_indices(arr.shape[0], size)]

    t = torch.from_numpy(np.ascontiguousarray(arr)).unsqueeze(1)  # [size, 1, H, W]
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=True)
    t = t.squeeze(1).unsqueeze(0)  # [1, size, size, size]

    lo, hi = t.min(), t.max()
    t = (t - lo) / (hi - lo) if hi > lo else torch.zeros_like(t)
    return Volume(id=rec.id, data=t)


def extract_subvolume(vol: Volume, rng: torch.Generator,
                      cfg: AugmentConfig = AugmentConfig()) -> torch.Tensor:
    """Random crop zoomed back to full size, with intensity jitter and flips.

    Fully determined by the generator state; draws happen in a fixed order
    (corner, shift, scale, flips) so streams stay reproducible.
    """
    data = vol.data
    size = data.shape[-1]
    c = cfg.crop_size
    if c > size:
        raise CropLargerThanVolume(f"crop {c} > volume {size}")
    corner = [int(torch.randint(0, size - c + 1, (1,), generator=rng)) for _ in range(3)]
    sub = data[:, corner[0]:corner[0] + c, corner[1]:corner[1] + c, corner[2]:corner[2] + c]
    if c != size:
        sub = F.interpolate(sub.unsqueeze(0), size=(size,) * 3, mode="trilinear",
                            align_corners=True).squeeze(0)
    shift = (torch.rand(1, generator=rng).item() * 2 - 1) * cfg.intensity_shift
    scale = 1.0 + (torch.rand(1, generator=rng).item() * 2 - 1) * cfg.intensity_scale
    sub = sub * scale + shift
    for axis in (1, 2, 3):
        if torch.rand(1, generator=rng).item() < cfg.flip_prob:
            sub = torch.flip(sub, dims=(axis,))
    return sub


# --- on-disk container ---

def write_volume_dir(path, scan_id: str, slices: np.ndarray) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(slices, dtype="<f4")
    meta = {"id": scan_id, "shape": list(arr.shape), "dtype": "f32"}
    (path / "meta.json").write_text(json.dumps(meta))
    (path / "volume.raw").write_bytes(arr.tobytes())


def read_volume_dir(path) -> VolumeRecord:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("dtype") != "f32":
        raise ValueError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    shape = tuple(meta["shape"])
    raw = np.frombuffer((path / "volume.raw").read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"{path}: raw payload does not match shape {shape}")
    return VolumeRecord(id=str(meta["id"]), slices=raw.reshape(shape).copy())


def list_volume_dirs(root) -> list[Path]:
    root = Path(root)
    return sorted(p.parent for p in root.glob("*/meta.json"))


def read_exclusion_list(path) -> set[str]:
    if path is None:
        return set()
    text = Path(path).read_text(encoding="utf-8")
    return {line.strip() for line in text.splitlines() if line.strip()}


def prep_directory(in_dir, out_dir, exclude_file=None, size: int = 96,
                   min_slices: int = MIN_SLICES) -> list[tuple[str, str]]:
    """Filter and resample every scan container under ``in_dir``.

    Accepted scans are written as cubes to ``out_dir``; returns the list of
    (id, reason) rejections.
    """
    excluded = read_exclusion_list(exclude_file)
    rejected = []
    for scan_dir in list_volume_dirs(in_dir):
        rec = read_volume_dir(scan_dir)
        ok, reason = filter_record(rec, min_slices=min_slices, excluded=excluded)
        if not ok:
            rejected.append((rec.id, reason))
            continue
        vol = resample_to_volume(rec, size=size, min_slices=min_slices)
        write_volume_dir(Path(out_dir) / scan_dir.name, vol.id,
                         vol.data.squeeze(0).numpy())
    return rejected
