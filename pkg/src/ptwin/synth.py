"""Raster-scan thermal simulator with matched synthetic CT porosity.

Each build layer is a serpentine raster over a rectangular footprint; frames are
the quasi-steady Rosenthal field of the moving source sampled on the pyrometer
grid. Pores are spherical voids drawn per layer at a rate that grows with the
distance of the step's hatch spacing or velocity from nominal. Each pore leaves
a decaying hot spot in the frames after the source passes over it, which is the
signal the models learn from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ct, fileio, registration
from .errors import ConfigError
from .registration import AlignmentOffsets

SAMPLE_KINDS = ("spacing", "velocity")
STEP_NAMES = "ABCDEFGHIJ"
# bottom (A) to top (J)
SPACING_HATCH_UM = (55.0, 60.0, 65.0, 70.0, 75.0, 45.0, 40.0, 35.0, 30.0, 25.0)
VELOCITY_M_S = (1.47, 1.54, 1.61, 1.68, 1.75, 1.33, 1.26, 1.19, 1.12, 1.05)
STEP_LENGTHS_MM = tuple(round(2.8 - 0.2 * i, 2) for i in range(10))
NOMINAL_HATCH_UM = 50.0
NOMINAL_VELOCITY_M_S = 1.4


@dataclass(frozen=True)
class ProcessParams:
    power_W: float = 103.0
    velocity_m_s: float = NOMINAL_VELOCITY_M_S
    hatch_um: float = NOMINAL_HATCH_UM
    layer_um: float = 30.0
    preheat_K: float = 303.0
    absorptivity: float = 0.4
    conductivity_W_mK: float = 20.0
    diffusivity_m2_s: float = 5.0e-6
    cap_K: float = 3100.0

    def __post_init__(self):
        for name in ("power_W", "velocity_m_s", "hatch_um", "layer_um", "preheat_K",
                     "conductivity_W_mK", "diffusivity_m2_s", "cap_K"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.absorptivity <= 1:
            raise ValueError("absorptivity must lie in (0, 1]")


def step_params(kind: str, base: Optional[ProcessParams] = None) -> list:
    base = base or ProcessParams()
    kind = kind.lower()
    if kind == "spacing":
        return [replace(base, hatch_um=h, velocity_m_s=NOMINAL_VELOCITY_M_S)
                for h in SPACING_HATCH_UM]
    if kind == "velocity":
        return [replace(base, velocity_m_s=v, hatch_um=NOMINAL_HATCH_UM) for v in VELOCITY_M_S]
    raise ValueError(f"unknown sample kind '{kind}'")


@dataclass(frozen=True)
class SynthConfig:
    kind: str = "spacing"
    seed: int = 0
    layers_per_step: int = 16
    steps: int = 10
    frames: int = 200
    frame_rate_hz: float = 6500.0
    max_raw_frames: int = 1000
    pixel_pitch_um: float = registration.PIXEL_PITCH_UM
    frame_shape: tuple = registration.FRAME_SHAPE
    footprint_row0_um: float = 100.0
    footprint_col0_um: float = 250.0
    width_um: float = 1000.0
    voxel_pitch_um: float = ct.VOXEL_PITCH_UM
    volume_yx: tuple = (524, 500)
    # pores per layer: base + gain * d ** power, d = normalised off-nominal distance
    pore_base_rate: float = 0.3
    pore_gain: float = 40.0  # wider hatch / faster scan (lack of fusion)
    pore_gain_dense: float = 4.0  # narrower hatch / slower scan
    pore_power: float = 4.0
    hatch_scale_um: float = 25.0
    velocity_scale_m_s: float = 0.35
    esd_log_mean: float = 3.316
    esd_log_sigma: float = 0.58
    min_voxels: int = ct.MIN_PORE_VOXELS
    gap_voxels: int = 2
    placement_tries: int = 30
    hotspot_K_per_um: float = 12.0
    hotspot_tau_s: float = 0.02

    @property
    def n_layers(self) -> int:
        return self.layers_per_step * self.steps

    @property
    def frame_dt_s(self) -> float:
        return 1.0 / self.frame_rate_hz

    def offsets(self) -> AlignmentOffsets:
        return registration.offsets_for(self.kind)

    def volume_shape(self) -> tuple:
        off = self.offsets()
        depth = (self.n_layers + off.layer_offset) * off.layer_voxels + 15
        return (depth,) + tuple(self.volume_yx)

    def step_length_um(self, step: int) -> float:
        return 1000.0 * STEP_LENGTHS_MM[step]


def porosity_rate(params: ProcessParams, cfg: SynthConfig) -> float:
    """Expected pores per layer; minimal at 50 um / 1.4 m/s and growing with the
    distance from nominal on either side. Off-nominal in the low-energy direction
    (wider hatch, faster scan) is far more porous than in the high-energy one."""
    dh = (params.hatch_um - NOMINAL_HATCH_UM) / cfg.hatch_scale_um
    dv = (params.velocity_m_s - NOMINAL_VELOCITY_M_S) / cfg.velocity_scale_m_s
    lean = max(dh, dv, 0.0)
    dense = max(-dh, -dv, 0.0)
    return (cfg.pore_base_rate + cfg.pore_gain * lean ** cfg.pore_power
            + cfg.pore_gain_dense * dense ** cfg.pore_power)


# -- thermal field ----------------------------------------------------------------

def rosenthal_temperature(x, y, z, params: ProcessParams, floor_m: float = 10.5e-6):
    """Moving point source on a semi-infinite body; (x, y, z) in metres relative to
    the source with x along the direction of travel."""
    x = np.asarray(x, dtype=np.float64)
    r = np.sqrt(x * x + np.square(y) + np.square(z))
    r = np.maximum(r, floor_m)
    q = params.absorptivity * params.power_W / (2 * math.pi * params.conductivity_W_mK)
    rise = q / r * np.exp(-params.velocity_m_s * (r + x) / (2 * params.diffusivity_m2_s))
    return np.minimum(params.preheat_K + rise, params.cap_K)


@dataclass
class RasterPath:
    starts: np.ndarray  # (n, 2) row/col in um
    ends: np.ndarray
    velocity_m_s: float

    @property
    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.ends - self.starts, axis=1)

    @property
    def line_times(self) -> np.ndarray:
        """Start time of every line and the total duration (length n + 1), seconds."""
        dur = self.lengths * 1e-6 / self.velocity_m_s
        return np.concatenate([[0.0], np.cumsum(dur)])

    @property
    def duration_s(self) -> float:
        return float(self.line_times[-1])

    def position(self, t) -> tuple:
        """Source position (um) and unit travel direction at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        bounds = self.line_times
        k = np.clip(np.searchsorted(bounds, t, side="right") - 1, 0, len(self.starts) - 1)
        seg = self.ends[k] - self.starts[k]
        unit = seg / np.linalg.norm(seg, axis=1, keepdims=True)
        travelled = (t - bounds[k]) * self.velocity_m_s * 1e6
        return self.starts[k] + unit * travelled[:, None], unit

    def time_at(self, line: int, along_um: float) -> float:
        return float(self.line_times[line] + along_um * 1e-6 / self.velocity_m_s)


def raster_path(params: ProcessParams, layer_index: int, length_um: float,
                cfg: SynthConfig) -> RasterPath:
    """Serpentine raster over the footprint. Even layers scan along the length with
    lines stacked across the width; odd layers are rotated 90 degrees."""
    r0, c0 = cfg.footprint_row0_um, cfg.footprint_col0_um
    h = params.hatch_um
    if layer_index % 2 == 0:
        n = int(cfg.width_um // h)
        cols = c0 + h / 2 + h * np.arange(n)
        starts = np.stack([np.full(n, r0), cols], 1)
        ends = np.stack([np.full(n, r0 + length_um), cols], 1)
    else:
        n = int(length_um // h)
        rows = r0 + h / 2 + h * np.arange(n)
        starts = np.stack([rows, np.full(n, c0)], 1)
        ends = np.stack([rows, np.full(n, c0 + cfg.width_um)], 1)
    flip = np.arange(n) % 2 == 1
    starts[flip], ends[flip] = ends[flip].copy(), starts[flip].copy()
    return RasterPath(starts, ends, params.velocity_m_s)


def path_projection(path: RasterPath, cfg: SynthConfig, step_um: float = 5.0) -> np.ndarray:
    """Pixel-grid image of every position the source visits (time-max of an ideal
    point-like track)."""
    h, w = cfg.frame_shape
    img = np.zeros((h, w), np.uint8)
    for s, e in zip(path.starts, path.ends):
        n = int(np.ceil(np.linalg.norm(e - s) / step_um)) + 1
        pts = s + (e - s) * np.linspace(0, 1, n)[:, None]
        rr = np.floor(pts[:, 0] / cfg.pixel_pitch_um).astype(int)
        cc = np.floor(pts[:, 1] / cfg.pixel_pitch_um).astype(int)
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        img[rr[ok], cc[ok]] = 1
    return img


def count_tracks(profile: np.ndarray) -> int:
    """Number of separate runs of nonzero entries in a 1-D profile."""
    on = np.asarray(profile) > 0
    return int(np.count_nonzero(on[1:] & ~on[:-1]) + on[0])


@dataclass(frozen=True)
class PoreSeed:
    layer: int
    center: tuple  # raw CT voxel (z, y, x)
    esd_um: float  # from the voxelised sphere
    voxel_count: int
    radius_vox: float
    pixel: tuple  # (row, col) in frame pixels
    pass_time_s: float


def select_frames(path: RasterPath, cfg: SynthConfig) -> tuple:
    """Raw frame times at the fixed frame rate, screened to those with the source in
    view, then resampled uniformly to exactly ``cfg.frames`` (repeating frames when
    fewer survive). Returns (times, raw_kept_count)."""
    n_raw = min(cfg.max_raw_frames, int(path.duration_s / cfg.frame_dt_s) + 1)
    times = np.arange(n_raw) * cfg.frame_dt_s
    pos, _ = path.position(times)
    h, w = cfg.frame_shape
    pitch = cfg.pixel_pitch_um
    inside = ((pos[:, 0] >= 0) & (pos[:, 0] < h * pitch)
              & (pos[:, 1] >= 0) & (pos[:, 1] < w * pitch))
    kept = times[inside]
    if kept.size == 0:
        kept = times[:1]
    idx = np.rint(np.linspace(0, kept.size - 1, cfg.frames)).astype(int)
    return kept[idx], int(kept.size)


def render_sequence(path: RasterPath, params: ProcessParams, cfg: SynthConfig,
                    pores: Sequence[PoreSeed] = ()) -> np.ndarray:
    """(frames, rows, cols) float32 temperatures in kelvin."""
    times, _ = select_frames(path, cfg)
    pos, unit = path.position(times)
    h, w = cfg.frame_shape
    pitch = cfg.pixel_pitch_um
    rows = np.arange(h)[:, None] * pitch
    cols = np.arange(w)[None, :] * pitch
    out = np.empty((len(times), h, w), np.float32)
    for f in range(len(times)):
        dr = (rows - pos[f, 0]) * 1e-6
        dc = (cols - pos[f, 1]) * 1e-6
        along = dr * unit[f, 0] + dc * unit[f, 1]
        across = -dr * unit[f, 1] + dc * unit[f, 0]
        field_k = rosenthal_temperature(along, across, 0.0, params,
                                        floor_m=0.5 * pitch * 1e-6)
        for p in pores:
            age = times[f] - p.pass_time_s
            if age < 0:
                continue
            amp = cfg.hotspot_K_per_um * p.esd_um * math.exp(-age / cfg.hotspot_tau_s)
            sig = max(0.7, p.esd_um / (2.0 * pitch))
            d2 = (np.arange(h)[:, None] - p.pixel[0]) ** 2 + (np.arange(w)[None, :] - p.pixel[1]) ** 2
            field_k = field_k + amp * np.exp(-d2 / (2 * sig * sig))
        out[f] = np.minimum(field_k, params.cap_K)
    return out


# -- porosity --------------------------------------------------------------------

def sample_esd(rng: np.random.Generator, n: int, cfg: SynthConfig) -> np.ndarray:
    return rng.lognormal(cfg.esd_log_mean, cfg.esd_log_sigma, size=n)


def sphere_offsets(radius_vox: float) -> np.ndarray:
    """Integer (dz, dy, dx) offsets inside a sphere of the given radius, C order."""
    r = int(math.floor(radius_vox))
    g = np.arange(-r, r + 1)
    dz, dy, dx = np.meshgrid(g, g, g, indexing="ij")
    inside = dz * dz + dy * dy + dx * dx <= radius_vox * radius_vox
    return np.stack([dz[inside], dy[inside], dx[inside]], 1)


def first_voxel(center: tuple, offsets: np.ndarray) -> tuple:
    """Position of the voxel reached first in a C-order (z, y, x) scan."""
    o = offsets[np.lexsort((offsets[:, 2], offsets[:, 1], offsets[:, 0]))[0]]
    return tuple(int(c + d) for c, d in zip(center, o))


def _px_to_aligned_voxel(px: float) -> float:
    return px * registration.VOXELS_PER_PX


def inject_pores(params: ProcessParams, layer_index: int, path: RasterPath, cfg: SynthConfig,
                 rng: np.random.Generator, placed: list) -> list:
    """Draw this layer's pores. Candidates sit on a random raster midline at a random
    point along it; draws smaller than ``cfg.min_voxels`` and candidates that would
    touch an existing pore or leave the volume are dropped."""
    off = cfg.offsets()
    zdim, ydim, xdim = cfg.volume_shape()
    _, oy, ox = off.offset_voxels
    z0 = off.layer_z0(layer_index)
    n = rng.poisson(porosity_rate(params, cfg))
    esds = sample_esd(rng, n, cfg)
    lengths = path.lengths
    times = path.line_times
    new = []
    for d in esds:
        radius = d / 2.0 / cfg.voxel_pitch_um
        offsets = sphere_offsets(radius)
        if len(offsets) < cfg.min_voxels:
            continue
        for _ in range(cfg.placement_tries):
            line = int(rng.integers(len(lengths)))
            along = float(rng.uniform(0, lengths[line]))
            s, e = path.starts[line], path.ends[line]
            p_um = s + (e - s) * (along / lengths[line])
            row_px, col_px = p_um / cfg.pixel_pitch_um
            cy = int(round(_px_to_aligned_voxel(row_px))) + oy
            cx = int(round(_px_to_aligned_voxel(col_px))) + ox
            cz = z0 + int(rng.integers(off.layer_voxels))
            r = int(math.floor(radius))
            if (cz - r < 0 or cz + r >= zdim or cy - r < 0 or cy + r >= ydim
                    or cx - r < 0 or cx + r >= xdim):
                continue
            clash = any(
                (cz - q.center[0]) ** 2 + (cy - q.center[1]) ** 2 + (cx - q.center[2]) ** 2
                < (radius + q.radius_vox + cfg.gap_voxels) ** 2
                for q in placed if abs(cz - q.center[0]) < 40)
            if clash:
                continue
            seed = PoreSeed(layer_index, (cz, cy, cx), ct.esd(len(offsets), cfg.voxel_pitch_um),
                            len(offsets), radius, (float(row_px), float(col_px)),
                            path.time_at(line, along))
            placed.append(seed)
            new.append(seed)
            break
    return new


@dataclass
class SyntheticSample:
    cfg: SynthConfig
    params: list
    pores: list  # PoreSeed in id order (id = index + 1)
    truth_counts: dict  # (layer, depth) -> count
    out_dir: Optional[Path] = None
    pore_table: ct.PoreTable = field(default_factory=ct.PoreTable)

    def layer_params(self, layer: int) -> ProcessParams:
        return self.params[layer // self.cfg.layers_per_step]


def layer_step(layer: int, cfg: SynthConfig) -> int:
    return layer // cfg.layers_per_step


def _layer_rng(cfg: SynthConfig, layer: int) -> np.random.Generator:
    kind_id = SAMPLE_KINDS.index(cfg.kind)
    return np.random.default_rng([cfg.seed, kind_id, layer])


def plan_sample(cfg: SynthConfig) -> tuple:
    """Raster paths and pores for every layer, with ids in first-voxel scan order.
    Returns (params per step, paths, pores sorted by id)."""
    params = step_params(cfg.kind)[:cfg.steps]
    paths, placed = [], []
    for layer in range(cfg.n_layers):
        p = params[layer_step(layer, cfg)]
        path = raster_path(p, layer, cfg.step_length_um(layer_step(layer, cfg)), cfg)
        paths.append(path)
        inject_pores(p, layer, path, cfg, _layer_rng(cfg, layer), placed)
    order = sorted(placed, key=lambda q: first_voxel(q.center, sphere_offsets(q.radius_vox)))
    return params, paths, order


def truth_counts(pores: Sequence[PoreSeed], cfg: SynthConfig) -> dict:
    """Per-(layer, depth) count of pores with a voxel inside the label window,
    computed from the pore geometry alone."""
    off = cfg.offsets()
    _, oy, ox = off.offset_voxels
    y0, y1 = 52 + oy, 468 + oy
    x0, x1 = 7 + ox, 423 + ox
    touched = []
    for q in pores:
        v = np.asarray(q.center) + sphere_offsets(q.radius_vox)
        inside = (v[:, 1] >= y0) & (v[:, 1] < y1) & (v[:, 2] >= x0) & (v[:, 2] < x1)
        touched.append(set(np.unique(v[inside, 0]).tolist()))
    counts = {}
    for layer in range(cfg.n_layers):
        top = off.layer_z0(layer) + off.layer_voxels
        for depth in (1, 2, 3):
            bottom = top - depth * off.layer_voxels
            counts[(layer, depth)] = sum(
                1 for zs in touched if any(bottom <= z < top for z in zs))
    return counts


def write_pores(ids: np.ndarray, pores: Sequence[PoreSeed]) -> None:
    for pid, q in enumerate(pores, start=1):
        v = np.asarray(q.center) + sphere_offsets(q.radius_vox)
        ids[v[:, 0], v[:, 1], v[:, 2]] = pid


def pore_records(pores: Sequence[PoreSeed], cfg: SynthConfig) -> ct.PoreTable:
    records = []
    for pid, q in enumerate(pores, start=1):
        v = np.asarray(q.center, dtype=np.float64) + sphere_offsets(q.radius_vox)
        records.append(ct.PoreRecord(pid, tuple(float(c) for c in v.mean(axis=0)),
                                     q.voxel_count, q.esd_um))
    return ct.PoreTable(records)


def sequence_name(layer: int) -> str:
    return f"seq_L{layer:03d}.ptsq"


def generate_sample(kind: str, seed: int, out_dir=None, cfg: Optional[SynthConfig] = None,
                    render: bool = True) -> SyntheticSample:
    """Plan, render and (when ``out_dir`` is given) write a full synthetic sample:
    one sequence file per layer, the CT volume, the pore table, per-layer truth
    counts and the label archive."""
    cfg = replace(cfg or SynthConfig(), kind=kind.lower(), seed=int(seed))
    params, paths, pores = plan_sample(cfg)
    sample = SyntheticSample(cfg, params, pores, truth_counts(pores, cfg),
                             pore_table=pore_records(pores, cfg))
    if out_dir is None:
        return sample
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sample.out_dir = out
    if render:
        by_layer: dict = {}
        for q in pores:
            by_layer.setdefault(q.layer, []).append(q)
        for layer, path in enumerate(paths):
            frames = render_sequence(path, params[layer_step(layer, cfg)], cfg,
                                     by_layer.get(layer, ()))
            _, raw_kept = select_frames(path, cfg)
            dt = cfg.frame_dt_s * max(raw_kept - 1, 1) / max(cfg.frames - 1, 1)
            fileio.write_sequence(out / sequence_name(layer), frames, cfg.pixel_pitch_um, dt)
    ids = fileio.create_volume(out / "volume.ctvx", cfg.volume_shape(), cfg.voxel_pitch_um)
    write_pores(ids, pores)
    ids.flush()
    fileio.write_pore_csv(out / "pores.csv", sample.pore_table)
    write_truth_csv(out / "truth.csv", sample)
    kept = ct.threshold_pores(sample.pore_table).ids
    records = registration.build_label_records(ids, range(cfg.n_layers), cfg.offsets(), kept)
    fileio.write_labels(out / "labels.ptlb", records)
    del ids
    fileio.write_kv(out / "sample.cfg", synth_config_dict(cfg))
    return sample


def write_truth_csv(path, sample: SyntheticSample) -> None:
    cfg = sample.cfg
    rows = []
    for layer in range(cfg.n_layers):
        p = sample.layer_params(layer)
        rows.append((layer, STEP_NAMES[layer_step(layer, cfg)], f"{p.hatch_um:g}",
                     f"{p.velocity_m_s:g}", f"{porosity_rate(p, cfg):.6f}",
                     sum(1 for q in sample.pores if q.layer == layer),
                     *(sample.truth_counts[(layer, d)] for d in (1, 2, 3))))
    fileio_rows = [("layer", "step", "hatch_um", "velocity_m_s", "rate", "injected",
                    "count1", "count2", "count3")] + rows
    Path(path).write_text("".join(",".join(str(v) for v in r) + "\n" for r in fileio_rows))


def synth_config_dict(cfg: SynthConfig) -> dict:
    out = {}
    for name in cfg.__dataclass_fields__:
        value = getattr(cfg, name)
        out[name] = " ".join(str(v) for v in value) if isinstance(value, tuple) else str(value)
    return out


def synth_config_from_dict(values: dict) -> SynthConfig:
    base = SynthConfig()
    kwargs = {}
    for name, text in values.items():
        if name not in base.__dataclass_fields__:
            raise ConfigError(f"unknown synth setting '{name}'")
        current = getattr(base, name)
        try:
            if isinstance(current, tuple):
                kwargs[name] = tuple(type(current[0])(float(t)) for t in text.split())
            elif isinstance(current, bool):
                kwargs[name] = text.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                kwargs[name] = int(text)
            elif isinstance(current, float):
                kwargs[name] = float(text)
            else:
                kwargs[name] = text
        except ValueError:
            raise ConfigError(f"bad value for '{name}': '{text}'") from None
    cfg = replace(base, **kwargs)
    if cfg.kind not in SAMPLE_KINDS:
        raise ConfigError(f"unknown sample kind '{cfg.kind}'")
    if cfg.layers_per_step < 1 or not 1 <= cfg.steps <= len(STEP_NAMES) or cfg.frames < 1:
        raise ConfigError("layers_per_step, steps and frames must be positive (steps <= 10)")
    return cfg
