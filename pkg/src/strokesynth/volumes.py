"""Volume and segmentation-map types, persistence, and intensity preprocessing.

Volumes live on disk as gzipped NIfTI-1 files with a JSON sidecar
(``<stem>.meta.json``) carrying the intensity-range tag and, for
segmentation maps, the label dictionary. Arrays are (X, Y, Z) throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .nifti import read_nifti, write_nifti

RANGE_RAW = "raw"
RANGE_UNIT = "unit"
RANGE_SYMMETRIC = "symmetric"
_RANGE_TAGS = (RANGE_RAW, RANGE_UNIT, RANGE_SYMMETRIC)

LESION_NAME = "lesion"
BACKGROUND_NAME = "background"


@dataclass
class Volume:
    """Dense 3D scalar field with voxel spacing and an intensity-range tag."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    range_tag: str = RANGE_RAW

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive shape, got {self.data.shape}")
        if self.range_tag not in _RANGE_TAGS:
            raise ValueError(f"unknown range_tag {self.range_tag!r}")
        if self.range_tag == RANGE_UNIT and (self.data.min() < 0 or self.data.max() > 1):
            raise ValueError("unit-tagged volume has values outside [0,1]")
        if self.range_tag == RANGE_SYMMETRIC and (self.data.min() < -1 or self.data.max() > 1):
            raise ValueError("symmetric-tagged volume has values outside [-1,1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class SegMap:
    """Dense 3D integer label field plus the dictionary naming each label."""

    labels: np.ndarray
    label_dict: dict[int, str]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 3:
            raise ValueError(f"label field must be 3D, got {self.labels.shape}")
        if self.labels.min() < 0:
            raise ValueError("label ids must be non-negative")
        self.label_dict = {int(k): str(v) for k, v in self.label_dict.items()}
        present = set(np.unique(self.labels).tolist())
        missing = present - set(self.label_dict)
        if missing:
            raise ValueError(f"labels {sorted(missing)} present in map but absent from label_dict")
        if self.label_dict.get(0) != BACKGROUND_NAME:
            raise ValueError("label 0 must be named 'background'")
        lesions = [k for k, v in self.label_dict.items() if v == LESION_NAME]
        if len(lesions) != 1:
            raise ValueError(f"exactly one label must be designated '{LESION_NAME}', got {lesions}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def lesion_id(self) -> int:
        return next(k for k, v in self.label_dict.items() if v == LESION_NAME)

    def lesion_mask(self) -> np.ndarray:
        return self.labels == self.lesion_id


@dataclass
class LabelVolume:
    """4D one-hot encoding (X, Y, Z, n_labels) of a segmentation map."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 4:
            raise ValueError(f"one-hot data must be 4D, got {self.data.shape}")
        if not np.all(self.data.sum(axis=-1) == 1):
            raise ValueError("one-hot channels must sum to 1 at every voxel")

    @property
    def n_labels(self) -> int:
        return self.data.shape[-1]


def _meta_path(path: Path) -> Path:
    stem = path.name
    for suffix in (".nii.gz", ".nii"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    return path.with_name(stem + ".meta.json")


def save_volume(vol: Volume, path: str | Path) -> None:
    path = Path(path)
    write_nifti(path, vol.data, vol.spacing)
    _meta_path(path).write_text(json.dumps({"range_tag": vol.range_tag}))


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    data, spacing = read_nifti(path)
    meta = _meta_path(path)
    range_tag = RANGE_RAW
    if meta.exists():
        range_tag = json.loads(meta.read_text()).get("range_tag", RANGE_RAW)
    return Volume(data=data.astype(np.float32), spacing=spacing, range_tag=range_tag)


def save_segmap(seg: SegMap, path: str | Path) -> None:
    path = Path(path)
    write_nifti(path, seg.labels.astype(np.int32), seg.spacing)
    meta = {"label_dict": {str(k): v for k, v in seg.label_dict.items()}}
    _meta_path(path).write_text(json.dumps(meta))


def load_segmap(path: str | Path) -> SegMap:
    path = Path(path)
    data, spacing = read_nifti(path)
    meta = _meta_path(path)
    if not meta.exists():
        raise FileNotFoundError(f"segmentation map sidecar missing: {meta}")
    label_dict = {int(k): v for k, v in json.loads(meta.read_text())["label_dict"].items()}
    return SegMap(labels=data, label_dict=label_dict, spacing=spacing)


def preprocess_intensity(
    vol: Volume,
    clip_percentile: float = 99.5,
    background_clip: float = 35.0,
    target: str = RANGE_UNIT,
) -> Volume:
    """Clip intensities and rescale to the target range.

    Values above the ``clip_percentile`` quantile are set to that quantile,
    values below ``background_clip`` are raised to it, and the result is
    min-max rescaled to [0,1] (``unit``) or [-1,1] (``symmetric``). A volume
    with zero dynamic range after clipping maps to all zeros (unit) or all
    -1 (symmetric).
    """
    if vol.range_tag != RANGE_RAW:
        raise ValueError(f"preprocess_intensity expects a raw volume, got {vol.range_tag!r}")
    if not 0 < clip_percentile <= 100:
        raise ValueError("clip_percentile must be in (0, 100]")
    if target not in (RANGE_UNIT, RANGE_SYMMETRIC):
        raise ValueError(f"target must be unit or symmetric, got {target!r}")

    data = vol.data.astype(np.float64)
    q = np.quantile(data, clip_percentile / 100.0)  # linear-interpolation quantile
    data = np.minimum(data, q)
    data = np.maximum(data, background_clip)

    lo, hi = data.min(), data.max()
    if hi - lo <= 0:
        unit = np.zeros_like(data)
    else:
        unit = (data - lo) / (hi - lo)
    out = unit if target == RANGE_UNIT else unit * 2.0 - 1.0
    return Volume(data=out.astype(np.float32), spacing=vol.spacing, range_tag=target)


def to_unit_range(vol: Volume) -> Volume:
    """Affinely map a symmetric-range volume to unit range (or pass unit through)."""
    if vol.range_tag == RANGE_UNIT:
        return vol
    if vol.range_tag == RANGE_SYMMETRIC:
        return Volume(data=(vol.data + 1.0) / 2.0, spacing=vol.spacing, range_tag=RANGE_UNIT)
    raise ValueError("raw volumes must go through preprocess_intensity")


def crop_slices(obj: Volume | SegMap, n_top: int = 4, n_bottom: int = 4):
    """Drop the top ``n_top`` and bottom ``n_bottom`` axial (Z) slices."""
    if n_top < 0 or n_bottom < 0:
        raise ValueError("crop counts must be non-negative")
    z = obj.shape[2]
    if z <= n_top + n_bottom:
        raise ValueError(f"cannot crop {n_top}+{n_bottom} slices from Z={z}")
    stop = z - n_top
    if isinstance(obj, Volume):
        return Volume(data=obj.data[:, :, n_bottom:stop], spacing=obj.spacing, range_tag=obj.range_tag)
    if isinstance(obj, SegMap):
        return replace(obj, labels=obj.labels[:, :, n_bottom:stop])
    raise TypeError(f"crop_slices expects Volume or SegMap, got {type(obj).__name__}")


def one_hot_encode(seg: SegMap, n_labels: int) -> LabelVolume:
    """One-hot encode a segmentation map into (X, Y, Z, n_labels)."""
    max_id = int(seg.labels.max())
    if max_id >= n_labels:
        raise ValueError(f"label id {max_id} out of range for n_labels={n_labels}")
    data = np.zeros(seg.shape + (n_labels,), dtype=np.uint8)
    np.put_along_axis(data, seg.labels[..., None].astype(np.int64), 1, axis=-1)
    return LabelVolume(data=data)
