"""Two-wavelength (750 / 900 nm) hybrid pyrometry over a beta-contour melt-pool region."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CalibrationDomainError, RegionError

P2_NM_K = 14388.0
# second radiation constant hc/k in nm K; with P2_NM_K and wavelengths in nm the
# exponent is 1000x too small, which flattens the radiance contrast of a frame
P2_PHYSICAL_NM_K = 1.4388e7
LAMBDA1_NM = 750.0
LAMBDA2_NM = 900.0
BETA = 0.7
PIXEL_PITCH_UM = 21.0


def ratio_slope(p2: float = P2_NM_K, lambda1: float = LAMBDA1_NM,
                lambda2: float = LAMBDA2_NM) -> float:
    """c1 for which 1 / T = c1 ln(I1 / I2) holds exactly for a grey body with
    matched channel gains."""
    return -1.0 / (p2 * (1.0 / lambda1 - 1.0 / lambda2))


@dataclass(frozen=True)
class PyroCalibration:
    c1: float = field(default_factory=ratio_slope)
    c2: float = 0.0
    p2: float = P2_NM_K
    beta: float = BETA
    lambda1: float = LAMBDA1_NM
    lambda2: float = LAMBDA2_NM

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.p2 <= 0:
            raise ValueError("p2 must be positive")


def physical_calibration(beta: float = BETA) -> PyroCalibration:
    """Calibration with the physical radiation constant and its matching ratio slope."""
    return PyroCalibration(c1=ratio_slope(P2_PHYSICAL_NM_K), p2=P2_PHYSICAL_NM_K, beta=beta)


@dataclass
class RadiancePair:
    i1: np.ndarray
    i2: np.ndarray
    pixel_pitch_um: float = PIXEL_PITCH_UM

    def __post_init__(self):
        self.i1 = np.asarray(self.i1, dtype=np.float64)
        self.i2 = np.asarray(self.i2, dtype=np.float64)
        if self.i1.shape != self.i2.shape:
            raise ValueError(f"channel shapes differ: {self.i1.shape} vs {self.i2.shape}")
        if np.any(self.i1 < 0) or np.any(self.i2 < 0):
            raise ValueError("radiance must be nonnegative")


# -- contour region ------------------------------------------------------------------

def contour_level(image, beta: float = BETA) -> float:
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("empty image")
    return beta * float(image.max())


# Cell corners: tl=8, tr=4, br=2, bl=1 (bit set when the corner is at or above the
# level). Edges: 0 top, 1 right, 2 bottom, 3 left. Saddles (5, 10) are resolved by
# the cell-centre average below.
_CASE_EDGES = {
    1: ((3, 2),), 2: ((2, 1),), 3: ((3, 1),), 4: ((0, 1),), 6: ((0, 2),),
    7: ((3, 0),), 8: ((3, 0),), 9: ((0, 2),), 11: ((0, 1),), 12: ((3, 1),),
    13: ((2, 1),), 14: ((3, 2),),
}
_SADDLE_EDGES = {
    # (case, centre above level) -> segments
    (5, True): ((3, 0), (2, 1)), (5, False): ((0, 1), (3, 2)),
    (10, True): ((0, 1), (3, 2)), (10, False): ((3, 0), (2, 1)),
}


def _edge_point(img, level, i, j, edge):
    """Interpolated crossing on ``edge`` of cell (i, j) and the key of that grid edge."""
    if edge == 0:
        a, b = img[i, j], img[i, j + 1]
        t = (level - a) / (b - a)
        return (i, j + t), ("h", i, j)
    if edge == 2:
        a, b = img[i + 1, j], img[i + 1, j + 1]
        t = (level - a) / (b - a)
        return (i + 1, j + t), ("h", i + 1, j)
    if edge == 3:
        a, b = img[i, j], img[i + 1, j]
        t = (level - a) / (b - a)
        return (i + t, j), ("v", i, j)
    a, b = img[i, j + 1], img[i + 1, j + 1]
    t = (level - a) / (b - a)
    return (i + t, j + 1), ("v", i, j + 1)


def marching_squares(image, level: float) -> list:
    """Iso-line segments of ``image`` at ``level`` in (row, col) pixel-centre
    coordinates. Each segment is ((p, q), (key_p, key_q)) where the keys identify
    the grid edges the endpoints lie on."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 2:
        return []
    above = img >= level
    case = (above[:-1, :-1] * 8 + above[:-1, 1:] * 4 + above[1:, 1:] * 2
            + above[1:, :-1] * 1)
    centre = 0.25 * (img[:-1, :-1] + img[:-1, 1:] + img[1:, 1:] + img[1:, :-1])
    segments = []
    cells_i, cells_j = np.nonzero((case != 0) & (case != 15))
    for i, j in zip(cells_i.tolist(), cells_j.tolist()):
        c = int(case[i, j])
        if c in (5, 10):
            pairs = _SADDLE_EDGES[(c, bool(centre[i, j] >= level))]
        else:
            pairs = _CASE_EDGES[c]
        for e0, e1 in pairs:
            p, kp = _edge_point(img, level, i, j, e0)
            q, kq = _edge_point(img, level, i, j, e1)
            segments.append(((p, q), (kp, kq)))
    return segments


def join_segments(segments: list) -> list:
    """Chain segments sharing edge crossings into polylines; closed loops repeat
    their first point at the end."""
    by_key: dict = {}
    for n, (_, keys) in enumerate(segments):
        for k in keys:
            by_key.setdefault(k, []).append(n)
    used = [False] * len(segments)
    lines = []

    def walk(start_seg, start_end):
        pts, keys = segments[start_seg]
        path = [pts[1 - start_end], pts[start_end]]
        key = keys[start_end]
        used[start_seg] = True
        while True:
            nxt = [s for s in by_key.get(key, []) if not used[s]]
            if not nxt:
                return path, key
            s = nxt[0]
            used[s] = True
            p, k = segments[s]
            end = 1 if k[0] == key else 0
            path.append(p[end])
            key = k[end]

    # open chains start at a crossing that only one segment touches
    for key, segs in sorted(by_key.items()):
        if len(segs) == 1 and not used[segs[0]]:
            s = segs[0]
            # enter at the dangling end, leave through the other
            path, _ = walk(s, 1 - segments[s][1].index(key))
            lines.append(np.array(path))
    for s in range(len(segments)):
        if not used[s]:
            path, _ = walk(s, 1)
            lines.append(np.array(path))
    return lines


@dataclass
class ContourRegion:
    mask: np.ndarray
    level: float
    segments: list

    @property
    def boundary(self) -> list:
        return join_segments(self.segments)


def contour_region(image, beta: float = BETA) -> ContourRegion:
    img = np.asarray(image, dtype=np.float64)
    level = contour_level(img, beta)
    return ContourRegion(img >= level, level, marching_squares(img, level))


# -- temperature formulas ------------------------------------------------------------

def temperature_ratio(r, cal: PyroCalibration):
    """T_R = 1 / (c1 ln R + c2)."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise CalibrationDomainError("intensity ratio must be positive")
    denom = cal.c1 * np.log(r) + cal.c2
    if np.any(denom <= 0):
        raise CalibrationDomainError("c1 ln R + c2 must be positive")
    out = 1.0 / denom
    return float(out) if out.ndim == 0 else out


def ratio_for_temperature(t: float, cal: PyroCalibration) -> float:
    """Inverse of ``temperature_ratio``."""
    if cal.c1 == 0:
        raise CalibrationDomainError("ratio is undetermined when c1 = 0")
    return math.exp((1.0 / t - cal.c2) / cal.c1)


def a_lambda(i1_mean: float, t_r: float, cal: PyroCalibration) -> float:
    if t_r <= 0:
        raise CalibrationDomainError("ratio temperature must be positive")
    return i1_mean * math.exp(cal.p2 / (cal.lambda1 * t_r))


def hybrid_pixel_temperature(a: float, i2, cal: PyroCalibration) -> tuple:
    """T_H = p2 / (lambda2 ln(A / I2)) per pixel; returns (temperatures, valid) with
    NaN wherever ln(A / I2) is not a positive finite number."""
    i2 = np.asarray(i2, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(a / i2)
        valid = np.isfinite(log_ratio) & (log_ratio > 0)
        t_h = np.where(valid, cal.p2 / (cal.lambda2 * log_ratio), np.nan)
    return t_h, valid


@dataclass
class HybridResult:
    temperature: np.ndarray  # K inside the valid region, NaN elsewhere
    region: ContourRegion
    valid: np.ndarray
    ratio: float
    t_ratio: float
    a_lambda: float


def hybrid_temperature(pair: RadiancePair, cal: Optional[PyroCalibration] = None) -> HybridResult:
    cal = cal or PyroCalibration()
    if pair.i1.size == 0 or pair.i1.max() <= 0:
        raise RegionError("no signal in the short-wavelength image")
    region = contour_region(pair.i1, cal.beta)
    mask = region.mask
    if not mask.any():
        raise RegionError("empty contour region")
    i1_mean = float(pair.i1[mask].mean())
    i2_mean = float(pair.i2[mask].mean())
    if i2_mean <= 0:
        raise RegionError("no signal in the long-wavelength image over the region")
    r = i1_mean / i2_mean
    t_r = temperature_ratio(r, cal)
    a = a_lambda(i1_mean, t_r, cal)
    t_h, valid = hybrid_pixel_temperature(a, pair.i2, cal)
    valid &= mask
    t_h = np.where(valid, t_h, np.nan)
    return HybridResult(t_h, region, valid, r, t_r, a)


# -- forward model -------------------------------------------------------------------

RADIANCE_SCALE = 1.0e6


def synth_radiance(temperature, emissivity: float = 0.35,
                   cal: Optional[PyroCalibration] = None,
                   pixel_pitch_um: float = PIXEL_PITCH_UM,
                   scale: float = RADIANCE_SCALE) -> RadiancePair:
    """Grey-body Wien radiance in both channels.

    Each channel is the Wien spectral radiance eps * lambda^-5 * exp(-p2 / (lambda T))
    times a detector gain proportional to lambda^5, i.e. channels are gain-matched
    so their prefactors agree. That is the condition under which the hybrid
    formula closes exactly.
    """
    cal = cal or PyroCalibration()
    t = np.asarray(temperature, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("temperature must be positive")
    if not 0 < emissivity <= 1:
        raise ValueError("emissivity must lie in (0, 1]")
    i1 = emissivity * scale * np.exp(-cal.p2 / (cal.lambda1 * t))
    i2 = emissivity * scale * np.exp(-cal.p2 / (cal.lambda2 * t))
    return RadiancePair(i1, i2, pixel_pitch_um)


def fit_calibration(temperatures: Sequence[float] = tuple(range(1200, 3501, 100)),
                    emissivity: float = 0.35, beta: float = BETA) -> PyroCalibration:
    """Least-squares fit of 1 / T = c1 ln R + c2 on a ladder of uniform grey-body
    targets rendered by ``synth_radiance``."""
    base = PyroCalibration(beta=beta)
    temps = np.asarray(temperatures, dtype=np.float64)
    logs = []
    for t in temps:
        pair = synth_radiance(np.full((3, 3), t), emissivity, base)
        logs.append(math.log(pair.i1.mean() / pair.i2.mean()))
    design = np.stack([np.array(logs), np.ones_like(temps)], axis=1)
    (c1, c2), *_ = np.linalg.lstsq(design, 1.0 / temps, rcond=None)
    return PyroCalibration(c1=float(c1), c2=float(c2), beta=beta)
