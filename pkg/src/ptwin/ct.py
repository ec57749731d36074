"""Pore segmentation of CT volumes, per-pore statistics and ESD thresholding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import RegionError

VOXEL_PITCH_UM = 3.63
LAYER_VOXELS = 9
MIN_PORE_VOXELS = 100


@dataclass(frozen=True)
class PoreRecord:
    id: int
    centroid: tuple  # (z, y, x) in voxels
    voxel_count: int
    esd_um: float


@dataclass
class PoreTable:
    records: list = field(default_factory=list)
    # population statistics used by the last threshold pass (None if not thresholded
    # or if nothing survived the voxel-count filter)
    mu: Optional[float] = None
    sigma: Optional[float] = None
    threshold_um: Optional[float] = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PoreRecord]:
        return iter(self.records)

    @property
    def ids(self) -> np.ndarray:
        return np.array([r.id for r in self.records], dtype=np.int64)

    @property
    def esds(self) -> np.ndarray:
        return np.array([r.esd_um for r in self.records], dtype=np.float64)

    @property
    def voxel_counts(self) -> np.ndarray:
        return np.array([r.voxel_count for r in self.records], dtype=np.int64)


def esd(voxel_count, pitch_um: float = VOXEL_PITCH_UM):
    """Diameter of the sphere with the same volume as ``voxel_count`` cubic voxels."""
    n = np.asarray(voxel_count, dtype=np.float64)
    if np.any(n < 1):
        raise ValueError("voxel count must be at least 1")
    d = 2.0 * np.cbrt(3.0 * n * pitch_um ** 3 / (4.0 * math.pi))
    return float(d) if d.ndim == 0 else d


def structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def label_components(binary: np.ndarray, connectivity: int = 26) -> tuple:
    """Label connected void clusters; ids run 1..n in order of each cluster's first
    voxel in C (z, y, x) scan order. Returns (ids as uint32, n)."""
    binary = np.asarray(binary, dtype=bool)
    if binary.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {binary.shape}")
    ids, n = ndimage.label(binary, structure=structure(connectivity), output=np.uint32)
    return ids, int(n)


def pore_table(ids: np.ndarray, pitch_um: float = VOXEL_PITCH_UM, chunk: int = 64) -> PoreTable:
    """Per-id voxel counts, centroids and ESDs, streamed over z-chunks so memory maps
    of full volumes need not be loaded at once."""
    counts: dict = {}
    sums: dict = {}
    for z0 in range(0, ids.shape[0], chunk):
        block = np.asarray(ids[z0:z0 + chunk])
        zz, yy, xx = np.nonzero(block)
        if zz.size == 0:
            continue
        labels = block[zz, yy, xx].astype(np.int64)
        uniq, inv, cnt = np.unique(labels, return_inverse=True, return_counts=True)
        sz = np.bincount(inv, weights=zz + z0)
        sy = np.bincount(inv, weights=yy)
        sx = np.bincount(inv, weights=xx)
        for k, lab in enumerate(uniq.tolist()):
            counts[lab] = counts.get(lab, 0) + int(cnt[k])
            acc = sums.setdefault(lab, [0.0, 0.0, 0.0])
            acc[0] += sz[k]
            acc[1] += sy[k]
            acc[2] += sx[k]
    records = []
    for lab in sorted(counts):
        n = counts[lab]
        cz, cy, cx = (s / n for s in sums[lab])
        records.append(PoreRecord(lab, (cz, cy, cx), n, esd(n, pitch_um)))
    return PoreTable(records)


def segment(binary: np.ndarray, connectivity: int = 26,
            pitch_um: float = VOXEL_PITCH_UM) -> tuple:
    """Binary occupancy -> (uint16 id volume, PoreTable)."""
    ids, n = label_components(binary, connectivity)
    if n > 0xFFFF:
        raise ValueError(f"{n} components do not fit 16-bit pore ids")
    ids = ids.astype(np.uint16)
    return ids, pore_table(ids, pitch_um)


def threshold_value(mu: float, sigma: float, sigma_mult: float = 1.0) -> float:
    return mu + sigma_mult * sigma


def threshold_pores(table: PoreTable, min_voxels: int = MIN_PORE_VOXELS,
                    sigma_mult: float = 1.0) -> PoreTable:
    """Drop pores under ``min_voxels``, then keep ESD >= mu + sigma_mult * sigma of the
    survivors (population standard deviation). ``sigma_mult = 0`` skips the ESD cut."""
    kept = [r for r in table if r.voxel_count >= min_voxels]
    if not kept:
        return PoreTable([])
    d = np.array([r.esd_um for r in kept])
    mu, sigma = float(d.mean()), float(d.std())
    if sigma_mult <= 0:
        return PoreTable(kept, mu, sigma, None)
    cut = threshold_value(mu, sigma, sigma_mult)
    return PoreTable([r for r in kept if r.esd_um >= cut], mu, sigma, cut)


def keep_ids(ids: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    """Copy of ``ids`` with every pore not listed in ``keep`` set to background."""
    ids = np.asarray(ids)
    keep = np.asarray(list(keep), dtype=np.int64)
    top = int(max(ids.max(initial=0), keep.max(initial=0)))
    lut = np.zeros(top + 1, dtype=ids.dtype)
    lut[keep] = keep.astype(ids.dtype)
    return lut[ids]


def layer_count(depth_voxels: int, layer_voxels: int = LAYER_VOXELS) -> int:
    return -(-depth_voxels // layer_voxels)


def layer_slice(ids: np.ndarray, layer_index: int, layer_voxels: int = LAYER_VOXELS) -> tuple:
    """Slab [i * layer_voxels, (i + 1) * layer_voxels); returns (slab, partial) where
    ``partial`` marks a final layer cut short by the end of the volume."""
    z = ids.shape[0]
    if not 0 <= layer_index < layer_count(z, layer_voxels):
        raise RegionError(f"layer {layer_index} outside a {z}-voxel-deep volume")
    z0 = layer_index * layer_voxels
    z1 = min(z0 + layer_voxels, z)
    return ids[z0:z1], (z1 - z0) < layer_voxels


def count_pores(ids: np.ndarray, z_start: int, depth_layers: int = 1,
                layer_voxels: int = LAYER_VOXELS, window: Optional[tuple] = None) -> int:
    """Distinct nonzero ids in the slab [z_start, z_start + depth_layers * layer_voxels),
    optionally restricted in-plane to ``window = (y0, y1, x0, x1)``."""
    if depth_layers < 1:
        raise ValueError("depth_layers must be at least 1")
    z_end = z_start + depth_layers * layer_voxels
    if z_start < 0 or z_end > ids.shape[0]:
        raise RegionError(f"slab [{z_start}, {z_end}) outside volume depth {ids.shape[0]}")
    if window is None:
        slab = ids[z_start:z_end]
    else:
        y0, y1, x0, x1 = window
        if y0 < 0 or x0 < 0 or y1 > ids.shape[1] or x1 > ids.shape[2]:
            raise RegionError(f"window {window} outside volume plane {ids.shape[1:]}")
        slab = ids[z_start:z_end, y0:y1, x0:x1]
    present = np.unique(np.asarray(slab))
    return int(np.count_nonzero(present))
