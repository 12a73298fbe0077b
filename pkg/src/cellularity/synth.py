"""Synthetic patches with known cellularity for end-to-end checks.

A patch holds blurred nucleus disks per class plus clamped Gaussian noise,
the exact point labels, and a cellularity score proportional to the area of
the malignant disk union, with independent label noise added.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import __version__
from .annotations import PointAnnotationSet, disk_union, write_annotations
from .pmap import CANONICAL_CHANNELS, NUCLEUS_CHANNELS, Channel, PixelMap, save_pmap
from .tables import write_targets


class CrowdedPatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthParams:
    width: int = 256
    height: int = 256
    n_normal: tuple = (0, 20)
    n_lymphocyte: tuple = (0, 20)
    n_malignant: tuple = (0, 80)
    diameter: float = 15.0
    softness_sigma: float = 1.0
    map_noise_sigma: float = 0.05
    label_noise_sigma: float = 0.02
    min_separation: float = 8.0
    max_attempts: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise ValueError(f"patches must be at least 64x64, got {self.width}x{self.height}")
        for name in ("softness_sigma", "map_noise_sigma", "label_noise_sigma", "min_separation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.diameter < 1:
            raise ValueError("diameter must be >= 1")
        for name in ("n_normal", "n_lymphocyte", "n_malignant"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be a range 0 <= lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (int(lo), int(hi)))

    def counts(self) -> dict:
        return {Channel.NORMAL.value: self.n_normal, Channel.LYMPHOCYTE.value: self.n_lymphocyte,
                Channel.MALIGNANT.value: self.n_malignant}

    @property
    def disk_area(self) -> int:
        """Pixel count of one unclipped disk."""
        reach = int(self.diameter // 2) + 1
        d = np.arange(-reach, reach + 1)
        return int(np.count_nonzero(d[:, None] ** 2 + d[None, :] ** 2 <= (self.diameter / 2) ** 2))

    @property
    def cellularity_scale(self) -> float:
        """Factor turning malignant area fraction into a score in [0, 1].

        The largest possible union (every malignant disk whole and disjoint)
        maps to 1.
        """
        return self.width * self.height / (max(self.n_malignant[1], 1) * self.disk_area)


@dataclass
class SynthPatch:
    patch_id: str
    maps: PixelMap
    annotations: PointAnnotationSet
    true_cellularity: float
    clean_cellularity: float
    malignant_area: int


def patch_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for patch ``index``; independent of how many patches are drawn."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _sample_centers(rng, counts: dict, params: SynthParams) -> list:
    points = []
    taken = np.empty((0, 2))
    min_d2 = params.min_separation ** 2
    for cls in NUCLEUS_CHANNELS:
        for _ in range(counts[cls]):
            for _attempt in range(params.max_attempts):
                x = int(rng.integers(0, params.width))
                y = int(rng.integers(0, params.height))
                if taken.size == 0 or np.min(((taken - (x, y)) ** 2).sum(axis=1)) >= min_d2:
                    break
            else:
                raise CrowdedPatchError(
                    f"could not place a {cls} nucleus after {params.max_attempts} attempts")
            points.append((x, y, cls))
            taken = np.vstack([taken, (x, y)])
    return points


def make_patch(params: SynthParams, index: int, counts: dict | None = None) -> SynthPatch:
    """Draw patch ``index``; ``counts`` overrides the sampled nucleus counts per class."""
    rng = patch_rng(params.seed, index)
    drawn = {cls: int(rng.integers(lo, hi + 1)) for cls, (lo, hi) in params.counts().items()}
    if counts:
        drawn.update(counts)
    points = _sample_centers(rng, drawn, params)
    ann = PointAnnotationSet(f"synth_{index:05d}", points)
    w, h = params.width, params.height
    masks = {cls: disk_union(ann.by_class(cls), w, h, params.diameter) for cls in NUCLEUS_CHANNELS}
    planes = {}
    for cls in NUCLEUS_CHANNELS:
        plane = masks[cls].astype(np.float64)
        if params.softness_sigma > 0:
            plane = ndimage.gaussian_filter(plane, params.softness_sigma, mode="reflect", truncate=4.0)
        planes[cls] = plane
    planes[Channel.BACKGROUND.value] = 1.0 - np.maximum.reduce([planes[c] for c in NUCLEUS_CHANNELS])
    noisy = []
    for cls in CANONICAL_CHANNELS:
        plane = planes[cls]
        if params.map_noise_sigma > 0:
            plane = plane + rng.normal(0.0, params.map_noise_sigma, plane.shape)
        noisy.append(np.clip(plane, 0.0, 1.0))
    area = int(np.count_nonzero(masks[Channel.MALIGNANT.value]))
    clean = area / (w * h) * params.cellularity_scale
    noise = rng.normal(0.0, params.label_noise_sigma) if params.label_noise_sigma > 0 else 0.0
    return SynthPatch(ann.patch_id, PixelMap(CANONICAL_CHANNELS, np.stack(noisy)), ann,
                      float(np.clip(clean + noise, 0.0, 1.0)), clean, area)


def generate(params: SynthParams, n: int, threads: int = 1) -> list:
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda i: make_patch(params, i), range(n)))
    return [make_patch(params, i) for i in range(n)]


def manifest(params: SynthParams | None, patches) -> dict:
    return {
        "generator": "cellularity.synth",
        "version": __version__,
        "params": asdict(params) if params is not None else None,
        "n": len(patches),
        "cellularity_scale": params.cellularity_scale if params is not None else None,
        "clean_cellularity": {p.patch_id: p.clean_cellularity for p in patches},
    }


def emit_dataset(patches, directory, params: SynthParams | None = None) -> None:
    """Write ``maps/<id>.pmap``, ``annotations.csv``, ``targets.csv`` and ``manifest.json``."""
    maps_dir = os.path.join(directory, "maps")
    os.makedirs(maps_dir, exist_ok=True)
    for p in patches:
        save_pmap(p.maps, os.path.join(maps_dir, f"{p.patch_id}.pmap"))
    write_annotations([p.annotations for p in patches], os.path.join(directory, "annotations.csv"))
    write_targets({p.patch_id: p.true_cellularity for p in patches}, os.path.join(directory, "targets.csv"))
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest(params, patches), fh, indent=1, sort_keys=True)
        fh.write("\n")
