"""Command-line entry point.

Every command validates its inputs first (exit 2 on failure), then runs (exit 1 on
an unexpected error) and finishes by writing ``manifest.txt`` into its output
directory. Configuration precedence: built-in defaults, then ``--config``, then
command-line flags.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import __version__
from .errors import ConfigError, FormatError, PtwinError

log = logging.getLogger("ptwin")

COMMANDS = ("synth", "segment", "align", "label", "train-count", "train-locate", "eval",
            "report")
MANIFEST = "manifest.txt"
PREDICTIONS = "predictions.csv"
EVAL_INFO = "eval.cfg"


class ValidationError(PtwinError):
    """Bad command-line input detected before any output was written."""


def apply_thread_cap() -> None:
    """Honour PTWIN_THREADS by capping the BLAS / OpenMP pools (before numpy loads)."""
    n = os.environ.get("PTWIN_THREADS")
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise ValidationError(f"PTWIN_THREADS must be a positive integer, got '{n}'")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = n


# -- manifest ------------------------------------------------------------------------

def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def input_digests(paths: Sequence[Path]) -> dict:
    """sha256 of every input file; directories contribute each file they hold."""
    out = {}
    for root in paths:
        root = Path(root)
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for f in files:
            if f.name == MANIFEST:
                continue
            key = f"{root.name}/{f.relative_to(root)}" if root.is_dir() else f.name
            out[key] = file_digest(f)
    return out


def write_manifest(out_dir: Path, command: str, config: dict, seed: Optional[int],
                   inputs: Sequence[Path]) -> None:
    from . import fileio

    canonical = fileio.format_kv(dict(sorted(config.items())))
    entries = {"command": command, "version": __version__,
               "seed": "" if seed is None else str(seed),
               "config_hash": hashlib.sha256(canonical.encode()).hexdigest()}
    entries.update({f"config.{k}": v for k, v in sorted(config.items())})
    entries.update({f"input.{k}": v for k, v in sorted(input_digests(inputs).items())})
    fileio.write_kv(out_dir / MANIFEST, entries)


# -- argument parsing ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ptwin", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", type=Path, help="flat key = value file")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--print-config", action="store_true",
                       help="print the effective configuration and exit")
        p.add_argument("-v", "--verbose", action="store_true")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="generate a synthetic sample")
    common(p)
    p.add_argument("--kind", choices=("spacing", "velocity"), default="spacing")

    p = sub.add_parser("segment", help="label pores in a CT volume and threshold them")
    common(p, seed=False)
    p.add_argument("--data", type=Path, help="volume file or sample directory")

    p = sub.add_parser("align", help="search the Z offset between frames and the volume")
    common(p, seed=False)
    p.add_argument("--data", type=Path, help="sample directory")
    p.add_argument("--kind", choices=("spacing", "velocity"))

    p = sub.add_parser("label", help="build count and localisation labels")
    common(p, seed=False)
    p.add_argument("--data", type=Path, help="sample directory")
    p.add_argument("--kind", choices=("spacing", "velocity"))
    p.add_argument("--offsets", type=Path, help="offsets file written by 'align'")

    helps = {"train-count": "train the pore-count CNN",
             "train-locate": "train the dense localisation transformer",
             "eval": "score a checkpoint on the held-out layers"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--data", type=Path, action="append", default=[],
                       help="sample directory (repeat for the 'all' dataset)")
        p.add_argument("--dataset", choices=("spacing", "velocity", "all"))
        p.add_argument("--augment", choices=("none", "rotational"))
        p.add_argument("--depth", type=int, choices=(1, 2, 3))
        p.add_argument("--mode", choices=("all-pores", "mu-sigma"))
        p.add_argument("--epochs", type=int)
        if name == "eval":
            p.add_argument("--task", choices=("count", "locate"))
            p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("report", help="rebuild report tables from stored predictions")
    common(p, seed=False)
    p.add_argument("--data", type=Path, help="directory written by 'eval' or a train command")
    return parser


def _require(path: Optional[Path], what: str, is_dir: Optional[bool] = None) -> Path:
    if path is None:
        raise ValidationError(f"missing {what}")
    if not path.exists():
        raise ValidationError(f"{what} not found: {path}")
    if is_dir is True and not path.is_dir():
        raise ValidationError(f"{what} must be a directory: {path}")
    if is_dir is False and path.is_dir():
        raise ValidationError(f"{what} must be a file: {path}")
    return path


def _require_out(args) -> Path:
    if args.out is None:
        raise ValidationError("missing --out")
    return args.out


def _file_config(args) -> dict:
    from . import fileio

    return fileio.read_kv(args.config) if args.config else {}


def _print_config(values: dict) -> None:
    from . import fileio

    sys.stdout.write(fileio.format_kv(values))


# -- commands ------------------------------------------------------------------------
# Each ``prepare_*`` validates and returns (config dict for --print-config, runner).

def prepare_synth(args):
    from . import synth

    values = synth.synth_config_dict(synth.SynthConfig())
    values.update(_file_config(args))
    values["kind"] = args.kind
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = synth.synth_config_from_dict(values)
    values = synth.synth_config_dict(cfg)

    def run():
        out = _require_out(args)
        synth.generate_sample(cfg.kind, cfg.seed, out, cfg)
        write_manifest(out, "synth", values, cfg.seed, [])

    return values, run


SEGMENT_DEFAULTS = {"connectivity": "26", "min_voxels": "100", "sigma_mult": "1.0"}


def _segment_values(args) -> dict:
    values = dict(SEGMENT_DEFAULTS)
    extra = _file_config(args)
    unknown = set(extra) - set(values)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values.update(extra)
    try:
        conn = int(values["connectivity"])
        int(values["min_voxels"])
        float(values["sigma_mult"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if conn not in (6, 26):
        raise ConfigError("connectivity must be 6 or 26")
    return values


def _volume_path(data: Path) -> Path:
    return data / "volume.ctvx" if data.is_dir() else data


def prepare_segment(args):
    from . import ct, fileio

    values = _segment_values(args)

    def run():
        data = _require(args.data, "--data")
        vol_path = _require(_volume_path(data), "volume file", is_dir=False)
        ids, pitch = fileio.read_volume(vol_path)
        out = _require_out(args)
        out.mkdir(parents=True, exist_ok=True)
        labels, table = _segment_volume(ids, pitch, int(values["connectivity"]))
        fileio.write_volume(out / "volume.ctvx", labels, pitch)
        fileio.write_pore_csv(out / "pores.csv", table)
        kept = ct.threshold_pores(table, int(values["min_voxels"]), float(values["sigma_mult"]))
        fileio.write_pore_csv(out / "kept_pores.csv", kept)
        fileio.write_kv(out / "threshold.cfg", {
            "pores": str(len(table)), "kept": str(len(kept)),
            "mu_um": _num(kept.mu), "sigma_um": _num(kept.sigma),
            "threshold_um": _num(kept.threshold_um)})
        write_manifest(out, "segment", values, None, [vol_path])

    return values, run


def _num(v) -> str:
    return "" if v is None else f"{v:.6f}"


def _segment_volume(ids, pitch, connectivity):
    import numpy as np

    from . import ct

    labels, n = ct.label_components(np.asarray(ids) != 0, connectivity)
    if n > 0xFFFF:
        raise ValueError(f"{n} components do not fit 16-bit pore ids")
    labels = labels.astype(np.uint16)
    return labels, ct.pore_table(labels, pitch)


def _sample_meta(data: Path) -> dict:
    from . import fileio

    _require(data, "--data", is_dir=True)
    return fileio.read_kv(_require(data / "sample.cfg", "sample.cfg", is_dir=False))


def prepare_align(args):
    values = {"radius": "3"}
    extra = _file_config(args)
    if set(extra) - set(values):
        raise ConfigError(f"unknown config keys: {', '.join(sorted(set(extra) - set(values)))}")
    values.update(extra)
    try:
        radius = int(values["radius"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    def run():
        from . import fileio, registration, synth

        data = args.data
        meta = _sample_meta(data)
        kind = args.kind or meta["kind"]
        out = _require_out(args)
        ids, _ = fileio.read_volume(_require(data / "volume.ctvx", "volume file"))
        n_layers = int(meta["layers_per_step"]) * int(meta["steps"])
        maps = {}
        for layer in range(n_layers):
            seq, _, _ = fileio.read_sequence(data / synth.sequence_name(layer))
            maps[layer] = registration.thermal_anomaly_map(seq)
        base = registration.offsets_for(kind)
        best, scores = registration.search_z_offset(ids, maps, base, radius)
        found = base.shifted(dz=best * base.layer_voxels)
        out.mkdir(parents=True, exist_ok=True)
        oz, oy, ox = found.offset_voxels
        fileio.write_kv(out / "offsets.cfg", {"sample": kind, "oz": str(oz), "oy": str(oy),
                                              "ox": str(ox), "shift_layers": str(best)})
        lines = ["shift_layers,score\n"] + [f"{s},{scores[s]:.6f}\n" for s in sorted(scores)]
        (out / "z_scores.csv").write_text("".join(lines))
        write_manifest(out, "align", values, None, [data])

    return values, run


def read_offsets(path: Path):
    from . import fileio, registration

    kv = fileio.read_kv(path)
    try:
        base = registration.offsets_for(kv["sample"])
        return registration.AlignmentOffsets(base.sample, (int(kv["oz"]), int(kv["oy"]),
                                                           int(kv["ox"])))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: bad offsets file ({exc})") from None


def prepare_label(args):
    values = {"min_voxels": "100", "sigma_mult": "1.0"}
    extra = _file_config(args)
    if set(extra) - set(values):
        raise ConfigError(f"unknown config keys: {', '.join(sorted(set(extra) - set(values)))}")
    values.update(extra)

    def run():
        from . import ct, fileio, registration

        data = args.data
        meta = _sample_meta(data)
        kind = args.kind or meta["kind"]
        offsets = (read_offsets(_require(args.offsets, "--offsets", is_dir=False))
                   if args.offsets else registration.offsets_for(kind))
        out = _require_out(args)
        ids, pitch = fileio.read_volume(_require(data / "volume.ctvx", "volume file"))
        table = ct.pore_table(ids, pitch)
        kept = ct.threshold_pores(table, int(values["min_voxels"]), float(values["sigma_mult"]))
        n_layers = int(meta["layers_per_step"]) * int(meta["steps"])
        records = registration.build_label_records(ids, range(n_layers), offsets, kept.ids)
        out.mkdir(parents=True, exist_ok=True)
        fileio.write_labels(out / "labels.ptlb", records)
        rows = ["layer,count1,count2,count3,cells_all_pores,cells_mu_sigma\n"]
        for i in range(0, len(records), 2):
            layer, _, grid_all, counts = records[i]
            grid_mu = records[i + 1][2]
            rows.append(f"{layer},{counts[0]},{counts[1]},{counts[2]},"
                        f"{int(grid_all.sum())},{int(grid_mu.sum())}\n")
        (out / "label_counts.csv").write_text("".join(rows))
        inputs = [data / "volume.ctvx"] + ([args.offsets] if args.offsets else [])
        write_manifest(out, "label", values, None, inputs)

    return values, run


def _run_config(args, task: Optional[str], base_values: Optional[dict] = None):
    from .training import RunConfig

    cfg = RunConfig.from_dict(base_values or {}, RunConfig(task=task or "count"))
    cfg = RunConfig.from_dict(_file_config(args), cfg)
    flags = {}
    for name in ("dataset", "augment", "depth", "mode", "epochs", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            flags[name] = value
    if task is not None:
        flags["task"] = task
    return RunConfig.from_dict(flags, cfg)


def _load_pairs(dirs: Sequence[Path], cfg):
    from . import fileio, training

    if not dirs:
        raise ValidationError("missing --data")
    by_kind: dict = {}
    for d in dirs:
        meta = _sample_meta(d)
        kind = meta.get("kind", "")
        if kind in by_kind:
            raise ValidationError(f"two --data directories hold a '{kind}' sample")
        by_kind[kind] = d
    wanted = ["spacing", "velocity"] if cfg.dataset == "all" else [cfg.dataset]
    missing = [k for k in wanted if k not in by_kind]
    if missing:
        raise ValidationError(f"dataset '{cfg.dataset}' needs a {missing[0]} sample in --data")
    pairs, used = [], []
    for kind in wanted:
        pairs.extend(training.load_sample_pairs(by_kind[kind], cfg.frames))
        used.append(by_kind[kind])
    try:
        train, test = training.split_dataset(pairs, cfg.seed, cfg.layers_per_step,
                                             cfg.strict_steps)
    except ConfigError as exc:
        raise ValidationError(f"{exc} (set strict_steps = false for reduced samples)") from None
    return train, test, used


def prepare_train(args, task: str):
    cfg = _run_config(args, task)
    values = cfg.to_dict()

    def run():
        from . import training

        out = _require_out(args)
        train, test, used = _load_pairs(args.data, cfg)
        result = training.train(cfg, train, test, out_dir=out,
                                log=log.info if log.isEnabledFor(logging.INFO) else None)
        write_predictions(out, result.model, cfg, test)
        write_manifest(out, f"train-{task}", values, cfg.seed, used)

    return values, run


def prepare_eval(args):
    from . import fileio

    ckpt = _require(args.checkpoint, "--checkpoint", is_dir=False)
    stored = ckpt.parent / "run.cfg"
    base = fileio.read_kv(stored) if stored.exists() else {}
    cfg = _run_config(args, args.task, base)
    values = cfg.to_dict()

    def run():
        from . import training
        from .autodiff import load_weights

        out = _require_out(args)
        _, test, used = _load_pairs(args.data, cfg)
        model = training.build_model(cfg)
        model.load_state_dict(load_weights(ckpt))
        write_predictions(out, model, cfg, test)
        write_manifest(out, "eval", values, cfg.seed, used + [ckpt])

    return values, run


def prepare_report(args):
    values: dict = {}

    def run():
        data = _require(args.data, "--data", is_dir=True)
        _require(data / PREDICTIONS, PREDICTIONS, is_dir=False)
        out = _require_out(args)
        write_reports(data, out)
        write_manifest(out, "report", values, None, [data / PREDICTIONS, data / EVAL_INFO])

    return values, run


# -- predictions and reports ------------------------------------------------------------

def _grid_hex(grid) -> str:
    import numpy as np

    return np.packbits(np.asarray(grid, dtype=np.uint8).ravel()).tobytes().hex()


def _hex_grid(text: str):
    import numpy as np

    bits = np.unpackbits(np.frombuffer(bytes.fromhex(text), dtype=np.uint8))
    return bits.reshape(16, 16)


def write_predictions(out: Path, model, cfg, pairs) -> None:
    """Store test-set predictions (binarised grids or raw counts) and the settings
    needed to rebuild the report, then write the report itself."""
    from . import fileio, metrics, training

    out.mkdir(parents=True, exist_ok=True)
    raw = training.predict(model, pairs, cfg)
    lines = ["sample,layer,step,target,prediction\n"]
    for p, r in zip(pairs, raw):
        if cfg.task == "count":
            target = str(p.count_labels[cfg.depth - 1])
            pred = f"{float(r):.6f}"
        else:
            target = _grid_hex(p.locate_labels[cfg.threshold_mode])
            pred = _grid_hex(metrics.binarize(r))
        lines.append(f"{p.sample},{p.layer_index},{p.step_id},{target},{pred}\n")
    (out / PREDICTIONS).write_text("".join(lines))
    fileio.write_kv(out / EVAL_INFO, {"task": cfg.task, "dataset": cfg.dataset,
                                      "augment": cfg.augment, "depth": str(cfg.depth),
                                      "mode": cfg.mode})
    write_reports(out, out)


def write_reports(src: Path, out: Path) -> None:
    import csv

    import numpy as np

    from . import fileio, metrics

    info = fileio.read_kv(src / EVAL_INFO)
    with open(src / PREDICTIONS, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError(f"{src / PREDICTIONS}: no predictions")
    out.mkdir(parents=True, exist_ok=True)
    layers = [int(r["layer"]) for r in rows]
    if info["task"] == "count":
        pred = np.rint([float(r["prediction"]) for r in rows])
        target = np.array([float(r["target"]) for r in rows])
        rep = metrics.count_report(layers, pred, target)
        table = [metrics.count_row(info["dataset"], info["augment"], int(info["depth"]), rep)]
        metrics.write_table(out / "report.csv", metrics.COUNT_COLUMNS, table)
        fileio.write_pgm(out / "scatter.pgm", metrics.scatter_raster(pred, target))
    else:
        pred = np.array([_hex_grid(r["prediction"]) for r in rows])
        target = np.array([_hex_grid(r["target"]) for r in rows])
        rep = metrics.locate_report(layers, pred, target)
        table = [metrics.locate_row(info["dataset"], info["augment"], info["mode"], rep)]
        metrics.write_table(out / "report.csv", metrics.LOCATE_COLUMNS, table)
        order = np.argsort(layers, kind="stable")
        fileio.write_pgm(out / "grids.pgm", metrics.grid_raster(
            [g for i in order for g in (target[i], pred[i])]))
    per_layer = [(s["sample"],) + tuple(r) for s, r in zip(rows, rep.per_layer)]
    metrics.write_table(out / "per_layer.csv", ("sample",) + metrics.PER_LAYER_COLUMNS,
                        per_layer)


# -- driver ----------------------------------------------------------------------------

PREPARE: dict = {
    "synth": prepare_synth,
    "segment": prepare_segment,
    "align": prepare_align,
    "label": prepare_label,
    "train-count": lambda a: prepare_train(a, "count"),
    "train-locate": lambda a: prepare_train(a, "locate"),
    "eval": prepare_eval,
    "report": prepare_report,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        apply_thread_cap()
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"ptwin: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    runner: Optional[Callable[[], None]] = None
    try:
        values, runner = PREPARE[args.command](args)
        if args.print_config:
            _print_config(values)
            return 0
        if args.out is None:
            raise ValidationError("missing --out")
        _validate_inputs(args)
    except (ValidationError, PtwinError, OSError, ValueError, KeyError) as exc:
        print(f"ptwin: error: {exc}", file=sys.stderr)
        return 2
    try:
        runner()
    except ValidationError as exc:
        print(f"ptwin: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"ptwin: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


def _validate_inputs(args) -> None:
    """Existence and format checks that need no heavy work, run before any output."""
    from . import fileio

    cmd = args.command
    if cmd == "segment":
        data = _require(args.data, "--data")
        fileio.read_volume_header(_require(_volume_path(data), "volume file", is_dir=False))
    elif cmd in ("align", "label"):
        _sample_meta(args.data)
        fileio.read_volume_header(_require(args.data / "volume.ctvx", "volume file"))
        if cmd == "label" and args.offsets:
            read_offsets(_require(args.offsets, "--offsets", is_dir=False))
    elif cmd in ("train-count", "train-locate", "eval"):
        if not args.data:
            raise ValidationError("missing --data")
        for d in args.data:
            _sample_meta(d)
            _require(d / "labels.ptlb", "labels.ptlb", is_dir=False)
    elif cmd == "report":
        data = _require(args.data, "--data", is_dir=True)
        _require(data / PREDICTIONS, PREDICTIONS, is_dir=False)
        fileio.read_kv(_require(data / EVAL_INFO, EVAL_INFO, is_dir=False))


def main() -> None:
    sys.exit(run())
