"""Pyrometry-to-CT alignment, input/label cropping and label construction.

Coordinates: a layer's *aligned* in-plane window is 520 x 423 voxels (Y x X) and
corresponds to the full 80 x 65 px thermal frame. The raw CT position of aligned
voxel (y, x) in build layer L is

    z = (L + layer_offset) * layer_voxels + oz,   y = y + oy,   x = x + ox.

In-plane positions that fall outside the scanned volume read as background;
slabs running past the top or bottom of the volume are an error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import ct
from .errors import RegionError, ShapeError

PIXEL_PITCH_UM = 21.0
VOXEL_PITCH_UM = ct.VOXEL_PITCH_UM
FRAME_SHAPE = (80, 65)
WINDOW_SHAPE = (520, 423)
CROPPED = 416
PADDED = 432
BLOCK = 24
GRID = 16
# voxels per frame pixel implied by the window / frame sizes (520 / 80 = 423 / 65)
VOXELS_PER_PX = WINDOW_SHAPE[0] / FRAME_SHAPE[0]


class ThresholdMode(enum.IntEnum):
    ALL_PORES = 0
    MU_SIGMA = 1

    @property
    def slug(self) -> str:
        return "all-pores" if self is ThresholdMode.ALL_PORES else "mu-sigma"

    @classmethod
    def parse(cls, text) -> "ThresholdMode":
        if isinstance(text, ThresholdMode):
            return text
        key = str(text).strip().lower().replace("_", "-")
        for mode in cls:
            if key in (mode.slug, mode.name.lower().replace("_", "-"), str(int(mode))):
                return mode
        raise ValueError(f"unknown threshold mode '{text}'")


@dataclass(frozen=True)
class AlignmentOffsets:
    sample: str
    offset_voxels: tuple  # (z, y, x)
    pixel_pitch_um: float = PIXEL_PITCH_UM
    voxel_pitch_um: float = VOXEL_PITCH_UM
    layer_offset: int = 5
    layer_voxels: int = ct.LAYER_VOXELS

    @property
    def voxels_per_pixel(self) -> float:
        return self.pixel_pitch_um / self.voxel_pitch_um

    def layer_z0(self, layer_index: int) -> int:
        return (layer_index + self.layer_offset) * self.layer_voxels + self.offset_voxels[0]

    def shifted(self, dz: int = 0, dy: int = 0, dx: int = 0) -> "AlignmentOffsets":
        oz, oy, ox = self.offset_voxels
        return AlignmentOffsets(self.sample, (oz + dz, oy + dy, ox + dx), self.pixel_pitch_um,
                                self.voxel_pitch_um, self.layer_offset, self.layer_voxels)


SPACING_OFFSETS = AlignmentOffsets("spacing", (-18, 0, 63))
VELOCITY_OFFSETS = AlignmentOffsets("velocity", (-14, -2, 73))


def offsets_for(sample: str) -> AlignmentOffsets:
    key = sample.strip().lower()
    if key == "spacing":
        return SPACING_OFFSETS
    if key == "velocity":
        return VELOCITY_OFFSETS
    raise ValueError(f"no stored offsets for sample '{sample}'")


def px_extent_to_voxels(px, pitch_px_um: float = PIXEL_PITCH_UM,
                        pitch_vox_um: float = VOXEL_PITCH_UM) -> tuple:
    if pitch_px_um <= 0 or pitch_vox_um <= 0:
        raise ValueError("pitches must be positive")
    return tuple(float(p) * pitch_px_um / pitch_vox_um for p in px)


# -- cropping -----------------------------------------------------------------------

def crop_input(frames: np.ndarray) -> np.ndarray:
    """Rows 8:72 and columns 1:65 of the trailing two axes (80 x 65 -> 64 x 64)."""
    frames = np.asarray(frames)
    if frames.ndim < 2 or frames.shape[-2] < 72 or frames.shape[-1] < 65:
        raise ShapeError(f"frame must be at least 80 x 65, got {frames.shape[-2:]}")
    return frames[..., 8:72, 1:65]


def crop_label(slab: np.ndarray) -> np.ndarray:
    """Trim 52 voxels from each end of the 520 axis and 7 from the start of the 423
    axis. A slab stored 423 x 520 in-plane is transposed to 520 x 423 first."""
    slab = np.asarray(slab)
    if slab.ndim != 3:
        raise ShapeError(f"label slab must be 3-D, got shape {slab.shape}")
    if slab.shape[1] < slab.shape[2]:
        slab = slab.transpose(0, 2, 1)
    if slab.shape[1] < 468 or slab.shape[2] < 423:
        raise ShapeError(f"label slab in-plane size {slab.shape[1:]} smaller than 468 x 423")
    return slab[:, 52:468, 7:423]


def downsample_label(slab: np.ndarray) -> np.ndarray:
    """Any-occupancy 24 x 24 pooling of a cropped slab: pad 416 -> 432 (8 per side),
    pool to 18 x 18 over the full depth, drop the outer ring -> 16 x 16."""
    slab = np.asarray(slab)
    if slab.ndim != 3 or slab.shape[1:] != (CROPPED, CROPPED):
        raise ShapeError(f"expected (depth, 416, 416), got {slab.shape}")
    occupied = np.asarray(slab != 0).any(axis=0)
    pad = (PADDED - CROPPED) // 2
    occupied = np.pad(occupied, pad)
    n = PADDED // BLOCK
    pooled = occupied.reshape(n, BLOCK, n, BLOCK).any(axis=(1, 3))
    return pooled[1:-1, 1:-1].astype(np.uint8)


# -- volume windows -----------------------------------------------------------------

def extract_window(ids: np.ndarray, z_start: int, depth: int, offsets: AlignmentOffsets,
                   shape: tuple = WINDOW_SHAPE) -> np.ndarray:
    """Aligned (depth, 520, 423) block starting at raw depth ``z_start``."""
    z_end = z_start + depth
    if z_start < 0 or z_end > ids.shape[0]:
        raise RegionError(f"slab [{z_start}, {z_end}) outside volume depth {ids.shape[0]}")
    _, oy, ox = offsets.offset_voxels
    h, w = shape
    out = np.zeros((depth, h, w), dtype=ids.dtype)
    y0, y1 = max(oy, 0), min(oy + h, ids.shape[1])
    x0, x1 = max(ox, 0), min(ox + w, ids.shape[2])
    if y1 > y0 and x1 > x0:
        out[:, y0 - oy:y1 - oy, x0 - ox:x1 - ox] = ids[z_start:z_end, y0:y1, x0:x1]
    return out


def layer_window(ids: np.ndarray, layer_index: int, offsets: AlignmentOffsets,
                 depth_layers: int = 1) -> np.ndarray:
    """Aligned window of ``depth_layers`` build layers ending with ``layer_index``
    (deeper layers are the earlier, lower ones)."""
    z0 = offsets.layer_z0(layer_index) - (depth_layers - 1) * offsets.layer_voxels
    return extract_window(ids, z0, depth_layers * offsets.layer_voxels, offsets)


def build_locate_label(ids: np.ndarray, layer_index: int, offsets: AlignmentOffsets,
                       mode=ThresholdMode.ALL_PORES,
                       kept_ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """16 x 16 occupancy grid for one build layer. In MU_SIGMA mode ``kept_ids``
    lists the pores that pass the ESD threshold; all others are ignored."""
    mode = ThresholdMode.parse(mode)
    slab = layer_window(ids, layer_index, offsets)
    if mode is ThresholdMode.MU_SIGMA:
        if kept_ids is None:
            raise ValueError("mu-sigma labels need the thresholded pore ids")
        slab = ct.keep_ids(slab, kept_ids)
    return downsample_label(crop_label(slab))


def build_count_label(ids: np.ndarray, layer_index: int, depth_layers: int,
                      offsets: AlignmentOffsets) -> int:
    """Distinct pores intersecting the cropped 416 x 416 window over
    ``depth_layers`` layers ending with ``layer_index``."""
    slab = crop_label(layer_window(ids, layer_index, offsets, depth_layers))
    return int(np.count_nonzero(np.unique(slab)))


def build_label_records(ids: np.ndarray, layers: Sequence[int], offsets: AlignmentOffsets,
                        kept_ids: Sequence[int]) -> list:
    """Label-archive records (layer, mode, grid, (count1, count2, count3)) for both
    threshold modes."""
    records = []
    for layer in layers:
        counts = tuple(build_count_label(ids, layer, d, offsets) for d in (1, 2, 3))
        for mode in ThresholdMode:
            grid = build_locate_label(ids, layer, offsets, mode, kept_ids)
            records.append((int(layer), int(mode), grid, counts))
    return records


# -- Z offset search ---------------------------------------------------------------

def thermal_anomaly_map(frames: np.ndarray) -> np.ndarray:
    """16 x 16 map of persistent local hot spots: each cropped 64 x 64 frame minus
    its 7 x 7 median, clipped at zero, averaged over time, max-pooled 4 x 4. The
    moving melt pool touches any pixel briefly, so stationary spots dominate."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-2:] != (64, 64):
        frames = crop_input(frames)
    local = ndimage.median_filter(frames, size=(1, 7, 7), mode="nearest")
    excess = np.clip(frames - local, 0.0, None).mean(axis=0)
    return excess.reshape(GRID, 4, GRID, 4).max(axis=(1, 3))


def overlap_score(anomaly: np.ndarray, occupancy: np.ndarray) -> float:
    """Pearson correlation of an anomaly map with a label grid (0 if either is flat)."""
    a = np.asarray(anomaly, dtype=np.float64).ravel()
    b = np.asarray(occupancy, dtype=np.float64).ravel()
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def search_z_offset(ids: np.ndarray, anomaly_maps: Mapping[int, np.ndarray],
                    offsets: AlignmentOffsets, radius: int = 3) -> tuple:
    """Try whole-layer shifts in [-radius, radius]; returns (best shift, scores)."""
    scores = {}
    for shift in range(-radius, radius + 1):
        trial = offsets.shifted(dz=shift * offsets.layer_voxels)
        total = 0.0
        for layer, anomaly in sorted(anomaly_maps.items()):
            try:
                grid = build_locate_label(ids, layer, trial)
            except RegionError:
                continue
            total += overlap_score(anomaly, grid)
        scores[shift] = total
    best = max(scores, key=lambda s: (scores[s], -abs(s)))
    return best, scores
