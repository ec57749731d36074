"""Regression and overlap scores for the two prediction tasks, plus report writers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

BINARIZE_AT = 0.5


def _pair(pred, target) -> tuple:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise ShapeError(f"prediction has {p.size} values, target has {t.size}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.sqrt(np.mean(np.square(p - t))))


def r2(pred, target) -> Optional[float]:
    """Coefficient of determination; ``None`` when the target is constant."""
    p, t = _pair(pred, target)
    ss_tot = float(np.sum(np.square(t - t.mean())))
    if ss_tot == 0.0:
        return None
    return 1.0 - float(np.sum(np.square(t - p))) / ss_tot


def binarize(probs, threshold: float = BINARIZE_AT) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def iou(pred_grid, target_grid) -> float:
    """Jaccard index of the porous cells; two empty grids score 1.0."""
    a = np.asarray(pred_grid).astype(bool)
    b = np.asarray(target_grid).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"grid shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass
class MetricReport:
    rmse: Optional[float] = None
    r2: Optional[float] = None
    iou_mean: Optional[float] = None
    iou_max: Optional[float] = None
    per_layer: list = field(default_factory=list)


def count_report(layers: Sequence[int], pred, target) -> MetricReport:
    p, t = _pair(pred, target)
    rows = [(int(layer), float(a), float(b), None) for layer, a, b in zip(layers, p, t)]
    return MetricReport(rmse=rmse(p, t), r2=r2(p, t), per_layer=rows)


def locate_report(layers: Sequence[int], pred_grids, target_grids) -> MetricReport:
    pred_grids = np.asarray(pred_grids)
    target_grids = np.asarray(target_grids)
    if len(pred_grids) == 0:
        raise ValueError("empty input")
    scores = [iou(a, b) for a, b in zip(pred_grids, target_grids)]
    rows = [(int(layer), int(a.sum()), int(b.sum()), s)
            for layer, a, b, s in zip(layers, pred_grids, target_grids, scores)]
    return MetricReport(iou_mean=float(np.mean(scores)), iou_max=float(np.max(scores)),
                        per_layer=rows)


def fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


COUNT_COLUMNS = ("dataset", "augmentation", "depth_or_mode", "rmse", "r2")
LOCATE_COLUMNS = ("dataset", "augmentation", "mode", "avg_iou", "max_iou")
PER_LAYER_COLUMNS = ("layer", "prediction", "target", "iou")


def write_table(path, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(v) if isinstance(v, float) or v is None else v for v in row])


def read_table(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def count_row(dataset: str, augmentation: str, depth: int, report: MetricReport) -> tuple:
    return (dataset, augmentation, depth, report.rmse, report.r2)


def locate_row(dataset: str, augmentation: str, mode: str, report: MetricReport) -> tuple:
    return (dataset, augmentation, mode, report.iou_mean, report.iou_max)


def scatter_raster(pred, target, size: int = 128) -> np.ndarray:
    """Prediction-vs-target scatter plot as an 8-bit image with the y = x diagonal."""
    p, t = _pair(pred, target)
    hi = max(float(p.max()), float(t.max()), 1.0)
    lo = min(float(p.min()), float(t.min()), 0.0)
    img = np.zeros((size, size), np.uint8)
    diag = np.arange(size)
    img[size - 1 - diag, diag] = 80
    scale = (size - 1) / (hi - lo)
    cols = np.clip(np.rint((t - lo) * scale), 0, size - 1).astype(int)
    rows = size - 1 - np.clip(np.rint((p - lo) * scale), 0, size - 1).astype(int)
    img[rows, cols] = 255
    return img


def grid_raster(grids: Sequence[np.ndarray], cell: int = 4, gap: int = 2) -> np.ndarray:
    """Side-by-side heat map of 2-D grids with values in [0, 1]."""
    grids = [np.clip(np.asarray(g, dtype=np.float64), 0.0, 1.0) for g in grids]
    h = max(g.shape[0] for g in grids) * cell
    w = sum(g.shape[1] * cell + gap for g in grids) - gap
    img = np.zeros((h, w), np.uint8)
    x = 0
    for g in grids:
        block = np.kron(np.rint(g * 255), np.ones((cell, cell))).astype(np.uint8)
        img[:block.shape[0], x:x + block.shape[1]] = block
        x += block.shape[1] + gap
    return img
