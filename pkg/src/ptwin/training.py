"""Datasets, stratified splits, rotation augmentation and the two training loops."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import fileio, metrics, registration, synth
from .autodiff import Adam, Tensor, cosine_warmup_lr, no_grad, save_weights
from .autodiff import functional as F
from .errors import ConfigError, ShapeError
from .models import CnnConfig, PoreCountCNN, VivitConfig, VivitDense
from .registration import ThresholdMode

DATASETS = ("spacing", "velocity", "all")
AUGMENTATIONS = ("none", "rotational")
TASKS = ("count", "locate")


@dataclass
class SamplePair:
    sequence: np.ndarray  # (frames, 64, 64) kelvin, cropped
    count_labels: tuple  # depth 1, 2, 3
    locate_labels: dict  # ThresholdMode -> 16 x 16 uint8
    step_id: str
    layer_index: int
    sample: str

    @property
    def key(self) -> tuple:
        return (self.sample, self.layer_index)


# -- run configuration ---------------------------------------------------------------

@dataclass
class RunConfig:
    task: str = "count"
    dataset: str = "spacing"
    augment: str = "none"
    depth: int = 1
    mode: str = "mu-sigma"
    epochs: int = 0  # 0 -> 500 for counting, 1000 for localisation
    lr: float = 1e-4
    lr_lo: float = 1e-5
    warmup: int = 10
    batch_size: int = 4
    seed: int = 0
    layers_per_step: int = 16
    strict_steps: bool = True
    init_output_bias: bool = True
    # model input: frames kept per sequence (uniform subsample of the 200)
    frames: int = 200
    fc_hidden: int = 64
    patch_px: int = 16
    dim: int = 256
    heads: int = 8
    spatial_layers: int = 4
    temporal_layers: int = 5
    mlp_ratio: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got '{self.task}'")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got '{self.dataset}'")
        if self.augment not in AUGMENTATIONS:
            raise ConfigError(f"augment must be one of {AUGMENTATIONS}, got '{self.augment}'")
        if self.depth not in (1, 2, 3):
            raise ConfigError(f"depth must be 1, 2 or 3, got {self.depth}")
        try:
            ThresholdMode.parse(self.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("batch_size", "frames", "layers_per_step", "fc_hidden", "dim", "heads",
                     "patch_px"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0 and lr > 0")

    @property
    def total_epochs(self) -> int:
        if self.epochs:
            return self.epochs
        return 500 if self.task == "count" else 1000

    @property
    def threshold_mode(self) -> ThresholdMode:
        return ThresholdMode.parse(self.mode)

    def cnn_config(self) -> CnnConfig:
        return CnnConfig(in_frames=self.frames, fc_hidden=self.fc_hidden)

    def vivit_config(self) -> VivitConfig:
        return VivitConfig(frames=self.frames, patch_px=self.patch_px, dim=self.dim,
                           heads=self.heads, spatial_layers=self.spatial_layers,
                           temporal_layers=self.temporal_layers, mlp_ratio=self.mlp_ratio)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = str(v).lower() if isinstance(v, bool) else str(v)
        return out

    @classmethod
    def from_dict(cls, values: dict, base: Optional["RunConfig"] = None) -> "RunConfig":
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, text in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key '{key}'")
            current = getattr(base, key)
            text = str(text).strip()
            try:
                if isinstance(current, bool):
                    if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(text)
                    kwargs[key] = text.lower() in ("true", "1", "yes")
                elif isinstance(current, int):
                    kwargs[key] = int(text)
                elif isinstance(current, float):
                    kwargs[key] = float(text)
                else:
                    kwargs[key] = text.lower()
            except ValueError:
                raise ConfigError(f"bad value for '{key}': '{text}'") from None
        return replace(base, **kwargs)


def load_run_config(path, overrides: Optional[dict] = None) -> RunConfig:
    cfg = RunConfig.from_dict(fileio.read_kv(path)) if path else RunConfig()
    if overrides:
        cfg = RunConfig.from_dict(overrides, cfg)
    return cfg


# -- data --------------------------------------------------------------------------

def subsample_frames(sequence: np.ndarray, frames: int) -> np.ndarray:
    if sequence.shape[0] == frames:
        return sequence
    idx = np.rint(np.linspace(0, sequence.shape[0] - 1, frames)).astype(int)
    return sequence[idx]


def load_sample_pairs(sample_dir, frames: int = 200) -> list:
    """All (sequence, labels) pairs of one synthetic sample directory."""
    sample_dir = Path(sample_dir)
    meta = fileio.read_kv(sample_dir / "sample.cfg")
    kind = meta["kind"]
    per_step = int(meta["layers_per_step"])
    records = fileio.read_labels(sample_dir / "labels.ptlb")
    by_layer: dict = {}
    for layer, mode, grid, counts in records:
        entry = by_layer.setdefault(layer, {"counts": tuple(counts), "grids": {}})
        entry["grids"][ThresholdMode(mode)] = grid
    pairs = []
    for layer in sorted(by_layer):
        seq, _, _ = fileio.read_sequence(sample_dir / synth.sequence_name(layer))
        seq = np.ascontiguousarray(subsample_frames(registration.crop_input(seq), frames))
        pairs.append(SamplePair(seq, by_layer[layer]["counts"], by_layer[layer]["grids"],
                                synth.STEP_NAMES[layer // per_step], layer, kind))
    return pairs


def split_dataset(pairs: Sequence[SamplePair], seed: int, layers_per_step: int = 16,
                  strict: bool = True) -> tuple:
    """Per (sample, step): a seeded shuffle sends 3/4 of the layers to training and
    1/4 to test (12 / 4 for 16-layer steps)."""
    groups: dict = {}
    for p in pairs:
        groups.setdefault((p.sample, p.step_id), []).append(p)
    train, test = [], []
    for g, key in enumerate(sorted(groups)):
        members = sorted(groups[key], key=lambda p: p.layer_index)
        if strict and len(members) != layers_per_step:
            raise ConfigError(f"step {key} has {len(members)} layers, expected {layers_per_step}")
        rng = np.random.default_rng([seed, g])
        order = rng.permutation(len(members))
        n_test = len(members) // 4 if len(members) >= 4 else 0
        test.extend(members[i] for i in sorted(order[:n_test]))
        train.extend(members[i] for i in sorted(order[n_test:]))
    return train, test


def augment_rotate(sequence: np.ndarray, angle_deg: float,
                   label_grid: Optional[np.ndarray] = None) -> tuple:
    """Rotate every frame by the same angle (bilinear, out-of-frame pixels filled
    with the sequence minimum); the optional label grid follows with
    nearest-neighbour sampling. Quarter turns are exact."""
    sequence = np.asarray(sequence)
    if sequence.shape[-1] != sequence.shape[-2]:
        raise ShapeError("rotation needs square frames")
    quarter = angle_deg / 90.0
    if float(quarter).is_integer():
        k = int(quarter) % 4
        rot = np.rot90(sequence, k, axes=(-2, -1)).copy()
        grid = None if label_grid is None else np.rot90(label_grid, k).copy()
        return rot, grid
    ambient = float(sequence.min())
    rot = ndimage.rotate(sequence, angle_deg, axes=(-1, -2), reshape=False, order=1,
                         mode="constant", cval=ambient, prefilter=False)
    grid = None
    if label_grid is not None:
        grid = ndimage.rotate(np.asarray(label_grid), angle_deg, axes=(-1, -2), reshape=False,
                              order=0, mode="constant", cval=0)
    return rot.astype(sequence.dtype), grid


def select_dataset(pairs_by_sample: dict, dataset: str) -> list:
    if dataset == "all":
        return [p for kind in sorted(pairs_by_sample) for p in pairs_by_sample[kind]]
    if dataset not in pairs_by_sample:
        raise ConfigError(f"dataset '{dataset}' has not been loaded")
    return list(pairs_by_sample[dataset])


# -- training ------------------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "train_loss", "test_loss", "lr", "metric")


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_state: Optional[dict] = None


def build_model(cfg: RunConfig):
    if cfg.task == "count":
        return PoreCountCNN(cfg.cnn_config(), seed=cfg.seed)
    return VivitDense(cfg.vivit_config(), seed=cfg.seed)


def _inputs(batch: Sequence[SamplePair], cfg: RunConfig, rng: Optional[np.random.Generator]):
    """Stacked model inputs and targets, rotated with fresh angles when augmenting."""
    xs, ys = [], []
    for p in batch:
        seq = subsample_frames(p.sequence, cfg.frames)
        target = (float(p.count_labels[cfg.depth - 1]) if cfg.task == "count"
                  else p.locate_labels[cfg.threshold_mode])
        if rng is not None and cfg.augment == "rotational":
            angle = float(rng.uniform(0.0, 180.0))
            grid = None if cfg.task == "count" else target
            seq, grid = augment_rotate(seq, angle, grid)
            if grid is not None:
                target = grid
        xs.append(seq)
        ys.append(target)
    return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.float32)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    return np.array_split(order, max(1, math.ceil(n / batch_size)))


def _loss(model, cfg: RunConfig, x, y):
    out = model(x)
    return F.mse_loss(out, y) if cfg.task == "count" else F.bce_loss(out, y)


def _init_output_bias(model, cfg: RunConfig, train: Sequence[SamplePair]) -> None:
    if cfg.task == "count":
        mean = np.mean([p.count_labels[cfg.depth - 1] for p in train])
        model.fc2.bias.data[:] = mean
    else:
        occ = np.mean([p.locate_labels[cfg.threshold_mode].mean() for p in train])
        occ = min(max(occ, 1e-3), 1 - 1e-3)
        model.head.convs[-1].bias.data[:] = math.log(occ / (1 - occ))


def predict(model, pairs: Sequence[SamplePair], cfg: RunConfig, batch_size: int = 8):
    """Eval-mode raw outputs: counts (float) or probability grids."""
    model.eval()
    outs = []
    with no_grad():
        for i in range(0, len(pairs), batch_size):
            x, _ = _inputs(pairs[i:i + batch_size], cfg, None)
            outs.append(model(x).data)
    model.train()
    return np.concatenate(outs) if outs else np.zeros(0)


def evaluate(model, pairs: Sequence[SamplePair], cfg: RunConfig) -> tuple:
    """(mean loss, metric report) on ``pairs`` in eval mode."""
    raw = predict(model, pairs, cfg)
    _, targets = _inputs(pairs, cfg, None)
    layers = [p.layer_index for p in pairs]
    if cfg.task == "count":
        loss = float(np.mean((raw - targets) ** 2))
        return loss, metrics.count_report(layers, np.rint(raw), targets)
    p = np.clip(raw.astype(np.float64), F.BCE_EPS, 1 - F.BCE_EPS)
    loss = float(-np.mean(targets * np.log(p) + (1 - targets) * np.log(1 - p)))
    return loss, metrics.locate_report(layers, metrics.binarize(raw), targets)


def train(cfg: RunConfig, train_pairs: Sequence[SamplePair],
          test_pairs: Sequence[SamplePair] = (), out_dir=None,
          log: Optional[Callable[[str], None]] = None,
          stop: Optional[Callable[[int, float, object], bool]] = None) -> TrainResult:
    """Adam on MSE (counting, constant lr) or BCE (localisation, warm-up + cosine
    schedule stepped per epoch). Logs one history row per epoch; keeps the state
    with the lowest test loss. ``stop(epoch, train_loss, model)`` may end training
    early (used by smoke tests)."""
    if not train_pairs:
        raise ConfigError("empty training set")
    model = build_model(cfg)
    if cfg.init_output_bias:
        _init_output_bias(model, cfg, train_pairs)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    epochs = cfg.total_epochs
    result = TrainResult(model)
    best_loss = math.inf
    for epoch in range(epochs):
        if cfg.task == "count":
            lr = cfg.lr
        else:
            lr = cosine_warmup_lr(epoch, epochs, warmup=min(cfg.warmup, epochs),
                                  lr_lo=cfg.lr_lo, lr_hi=cfg.lr)
        opt.lr = lr
        total, seen = 0.0, 0
        for idx in _batches(len(train_pairs), cfg.batch_size, rng):
            x, y = _inputs([train_pairs[i] for i in idx], cfg, rng)
            opt.zero_grad()
            loss = _loss(model, cfg, x, y)
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
            seen += len(idx)
        train_loss = total / seen
        if test_pairs:
            test_loss, report = evaluate(model, test_pairs, cfg)
            metric = report.rmse if cfg.task == "count" else report.iou_mean
        else:
            test_loss, metric = train_loss, None
        result.history.append((epoch, train_loss, test_loss, lr, metric))
        if test_loss < best_loss:
            best_loss = test_loss
            result.best_epoch = epoch
            result.best_state = {k: np.array(v, copy=True) for k, v in model.state_dict().items()}
        if log:
            log(f"epoch {epoch} train {train_loss:.6f} test {test_loss:.6f} lr {lr:.3e}")
        if stop is not None and stop(epoch, train_loss, model):
            break
    if out_dir is not None:
        save_run(result, cfg, out_dir)
    return result


def write_history(path, history: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for epoch, tr, te, lr, metric in history:
            writer.writerow([epoch, f"{tr:.6f}", f"{te:.6f}", f"{lr:.6e}", metrics.fmt(metric)])


def save_run(result: TrainResult, cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(out / "final.ptwt", result.model.state_dict())
    if result.best_state is not None:
        save_weights(out / "best.ptwt", result.best_state)
    write_history(out / "history.csv", result.history)
    fileio.write_kv(out / "run.cfg", cfg.to_dict())
