"""Procedural phantom brains: paired volumes and segmentation maps.

A phantom is a head ellipsoid filled with concentric, randomly deformed
tissue shells, each painted with its own base intensity plus Gaussian
noise. Stroke variants add hyperintense blob lesions strictly inside the
parenchyma. Everything is deterministic given the seed, so corpora can be
regenerated bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volumes import (
    BACKGROUND_NAME,
    LESION_NAME,
    RANGE_RAW,
    SegMap,
    Volume,
    save_segmap,
    save_volume,
)

DEFAULT_TISSUE_MEANS = (0.18, 0.30, 0.42, 0.54, 0.66, 0.78)


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (64, 64, 16)
    n_tissue_labels: int = 6
    tissue_intensity_means: tuple[float, ...] = DEFAULT_TISSUE_MEANS
    noise_sigma: float = 0.04
    lesion_hyperintensity_boost: float = 1.6
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[int, int] = (2, 5)
    background_intensity: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if len(self.tissue_intensity_means) != self.n_tissue_labels:
            raise ValueError("need one intensity mean per tissue label")
        means = self.tissue_intensity_means
        if any(not 0 < m < 1 for m in means):
            raise ValueError("tissue intensity means must lie in (0,1)")
        gaps = np.diff(means)
        if np.any(gaps < 2 * self.noise_sigma):
            raise ValueError("adjacent tissue means must be separated by >= 2*noise_sigma")
        if self.lesion_hyperintensity_boost <= 1:
            raise ValueError("lesion_hyperintensity_boost must exceed 1")
        if min(self.shape) < 8:
            raise ValueError(f"shape {self.shape} too small to host the tissue shells")

    @property
    def n_labels(self) -> int:
        """Total label count: background + tissues + lesion."""
        return self.n_tissue_labels + 2

    @property
    def lesion_id(self) -> int:
        return self.n_tissue_labels + 1

    @property
    def parenchyma_label_ids(self) -> frozenset[int]:
        # outermost shell (label 1) stands in for the CSF/skull rim and
        # never hosts lesions
        return frozenset(range(2, self.n_tissue_labels + 1))

    def label_dict(self) -> dict[int, str]:
        d = {0: BACKGROUND_NAME}
        d.update({k: f"tissue_{k}" for k in range(1, self.n_tissue_labels + 1)})
        d[self.lesion_id] = LESION_NAME
        return d


def _tissue_regions(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Integer region map: 0 background, 1..n_tissue concentric shells."""
    x, y, z = config.shape
    center = np.array([x, y, z]) / 2.0 + rng.uniform(-0.03, 0.03, size=3) * np.array([x, y, z])
    semi = np.array([x, y, z]) * rng.uniform(0.40, 0.46, size=3)

    grid = np.mgrid[0:x, 0:y, 0:z].astype(np.float64)
    rho = np.sqrt(sum(((grid[i] - center[i]) / semi[i]) ** 2 for i in range(3)))

    # smooth random deformation of the radial coordinate warps the shells
    noise = rng.standard_normal(config.shape)
    deform = ndimage.gaussian_filter(noise, sigma=max(2.0, min(config.shape) / 8.0))
    deform /= max(np.abs(deform).max(), 1e-12)
    rho = rho * (1.0 + 0.10 * deform)

    regions = np.zeros(config.shape, dtype=np.int32)
    inside = rho < 1.0
    shell = np.minimum((rho * config.n_tissue_labels).astype(np.int32), config.n_tissue_labels - 1)
    # innermost shell is the highest tissue label
    regions[inside] = config.n_tissue_labels - shell[inside]
    return regions


def _paint(config: PhantomConfig, regions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    data = rng.normal(config.background_intensity, config.noise_sigma / 2.0, size=config.shape)
    noise = rng.normal(0.0, config.noise_sigma, size=config.shape)
    for k in range(1, config.n_tissue_labels + 1):
        mask = regions == k
        data[mask] = config.tissue_intensity_means[k - 1] + noise[mask]
    return data.astype(np.float32)


def generate_phantom(config: PhantomConfig, seed: int) -> tuple[Volume, SegMap]:
    """Generate a healthy phantom; deterministic given (config, seed)."""
    rng = np.random.default_rng(seed)
    regions = _tissue_regions(config, rng)
    data = _paint(config, regions, rng)
    vol = Volume(data=data, range_tag=RANGE_RAW)
    seg = SegMap(labels=regions, label_dict=config.label_dict())
    return vol, seg


def _lesion_blob(
    config: PhantomConfig, rng: np.random.Generator, parenchyma: np.ndarray
) -> np.ndarray:
    """One lesion: union of 1-3 perturbed ellipsoids around a parenchyma seed point."""
    idx = np.argwhere(parenchyma)
    center = idx[rng.integers(len(idx))].astype(np.float64)
    r_lo, r_hi = config.lesion_radius_range
    grid = np.mgrid[0 : config.shape[0], 0 : config.shape[1], 0 : config.shape[2]].astype(np.float64)
    blob = np.zeros(config.shape, dtype=bool)
    for _ in range(rng.integers(1, 4)):
        offset = center + rng.uniform(-r_lo, r_lo, size=3)
        radii = rng.uniform(r_lo, r_hi, size=3)
        d = sum(((grid[i] - offset[i]) / radii[i]) ** 2 for i in range(3))
        blob |= d <= 1.0
    blob = ndimage.binary_closing(blob, structure=np.ones((3, 3, 3), dtype=bool))
    return blob & parenchyma


def generate_stroke_phantom(
    config: PhantomConfig, seed: int
) -> tuple[Volume, SegMap, np.ndarray]:
    """Healthy phantom plus hyperintense lesions inside the parenchyma.

    Returns (volume, segmap-with-lesion-label, binary lesion mask). The
    lesion label in the segmap equals the returned mask exactly.
    """
    rng = np.random.default_rng(seed)
    regions = _tissue_regions(config, rng)
    data = _paint(config, regions, rng).astype(np.float64)

    parenchyma = np.isin(regions, list(config.parenchyma_label_ids))
    if not parenchyma.any():
        raise ValueError("phantom has no parenchyma voxels to host a lesion")

    n_lesions = rng.integers(config.lesion_count_range[0], config.lesion_count_range[1] + 1)
    lesion = np.zeros(config.shape, dtype=bool)
    for _ in range(n_lesions):
        for _attempt in range(20):
            blob = _lesion_blob(config, rng, parenchyma)
            if blob.any():
                lesion |= blob
                break

    # boost the underlying tissue mean, then re-noise
    base = np.zeros(config.shape)
    for k in range(1, config.n_tissue_labels + 1):
        base[regions == k] = config.tissue_intensity_means[k - 1]
    data[lesion] = base[lesion] * config.lesion_hyperintensity_boost + rng.normal(
        0.0, config.noise_sigma, size=int(lesion.sum())
    )

    labels = regions.copy()
    labels[lesion] = config.lesion_id
    vol = Volume(data=data.astype(np.float32), range_tag=RANGE_RAW)
    seg = SegMap(labels=labels, label_dict=config.label_dict())
    return vol, seg, lesion


@dataclass
class CorpusEntry:
    id: str
    volume_path: str
    segmap_path: str
    lesion_path: str | None
    split: str
    seed: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "volume_path": self.volume_path,
            "segmap_path": self.segmap_path,
            "lesion_path": self.lesion_path,
            "split": self.split,
            "seed": self.seed,
        }
        d.update(self.extra)
        return d


def write_manifest(entries: list[CorpusEntry], path: str | Path) -> None:
    Path(path).write_text(json.dumps([e.to_json() for e in entries], indent=1, sort_keys=True))


def load_manifest(path: str | Path) -> list[CorpusEntry]:
    raw = json.loads(Path(path).read_text())
    fixed = {"id", "volume_path", "segmap_path", "lesion_path", "split", "seed"}
    return [
        CorpusEntry(
            id=r["id"],
            volume_path=r["volume_path"],
            segmap_path=r["segmap_path"],
            lesion_path=r.get("lesion_path"),
            split=r["split"],
            seed=r["seed"],
            extra={k: v for k, v in r.items() if k not in fixed},
        )
        for r in raw
    ]


def manifest_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_phantom_corpus(
    n_healthy: int,
    n_stroke: int,
    config: PhantomConfig,
    base_seed: int,
    out_dir: str | Path,
    train_fraction: float = 0.8,
) -> Path:
    """Generate and persist a phantom corpus; returns the manifest path.

    Sample i uses seed ``base_seed + i`` so serial and parallel builds
    agree. Split assignment is deterministic: the first
    ``round(train_fraction * n)`` samples of each arm are train.
    """
    if n_healthy < 0 or n_stroke < 0:
        raise ValueError("sample counts must be non-negative")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries: list[CorpusEntry] = []

    def split_for(i: int, n: int) -> str:
        return "train" if i < round(train_fraction * n) else "test"

    for i in range(n_healthy):
        seed = base_seed + i
        vol, seg = generate_phantom(config, seed)
        sid = f"healthy_{i:04d}"
        vpath, spath = out_dir / f"{sid}_vol.nii.gz", out_dir / f"{sid}_seg.nii.gz"
        save_volume(vol, vpath)
        save_segmap(seg, spath)
        entries.append(
            CorpusEntry(sid, vpath.name, spath.name, None, split_for(i, n_healthy), seed)
        )

    for j in range(n_stroke):
        seed = base_seed + n_healthy + j
        vol, seg, lesion = generate_stroke_phantom(config, seed)
        sid = f"stroke_{j:04d}"
        vpath, spath = out_dir / f"{sid}_vol.nii.gz", out_dir / f"{sid}_seg.nii.gz"
        lpath = out_dir / f"{sid}_lesion.nii.gz"
        save_volume(vol, vpath)
        save_segmap(seg, spath)
        save_volume(Volume(data=lesion.astype(np.float32)), lpath)
        entries.append(
            CorpusEntry(sid, vpath.name, spath.name, lpath.name, split_for(j, n_stroke), seed)
        )

    manifest = out_dir / "manifest.json"
    write_manifest(entries, manifest)
    return manifest
