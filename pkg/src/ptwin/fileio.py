"""Binary containers, PGM rasters, pore tables and flat config files."""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, FormatError

PathLike = Union[str, Path]

SEQ_MAGIC = b"PTSQ"
VOL_MAGIC = b"CTVX"
LABEL_MAGIC = b"PTLB"
FORMAT_VERSION = 1

_SEQ_HEADER = struct.Struct("<4sIIIIff")
_VOL_HEADER = struct.Struct("<4sIIIIf")
_LABEL_RECORD = struct.Struct("<IB256s3i")


def _check_magic(raw: bytes, magic: bytes, path) -> None:
    if raw[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")


# -- thermal sequences ------------------------------------------------------------

def write_sequence(path: PathLike, frames: np.ndarray, pixel_pitch_um: float,
                   frame_dt_s: float) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 3:
        raise FormatError(f"sequence must be T x H x W, got shape {frames.shape}")
    t, h, w = frames.shape
    header = _SEQ_HEADER.pack(SEQ_MAGIC, FORMAT_VERSION, t, h, w, pixel_pitch_um, frame_dt_s)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frames.tobytes())


def read_sequence(path: PathLike) -> tuple:
    """Returns (frames, pixel_pitch_um, frame_dt_s)."""
    raw = Path(path).read_bytes()
    _check_magic(raw, SEQ_MAGIC, path)
    if len(raw) < _SEQ_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, t, h, w, pitch, dt = _SEQ_HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _SEQ_HEADER.size + 4 * t * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} bytes, expected {expected}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_SEQ_HEADER.size).reshape(t, h, w)
    return frames.astype(np.float32), float(pitch), float(dt)


# -- CT volumes ------------------------------------------------------------------

def create_volume(path: PathLike, dims: tuple, pitch_um: float) -> np.memmap:
    """Allocate a zero-filled volume file and return a writable memory map of the ids."""
    z, y, x = (int(d) for d in dims)
    with open(path, "wb") as fh:
        fh.write(_VOL_HEADER.pack(VOL_MAGIC, FORMAT_VERSION, z, y, x, pitch_um))
        fh.truncate(_VOL_HEADER.size + 2 * z * y * x)
    return np.memmap(path, dtype="<u2", mode="r+", offset=_VOL_HEADER.size, shape=(z, y, x))


def write_volume(path: PathLike, ids: np.ndarray, pitch_um: float) -> None:
    ids = np.asarray(ids)
    if ids.ndim != 3:
        raise FormatError(f"volume must be Z x Y x X, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() > 0xFFFF):
        raise FormatError("pore ids must fit in an unsigned 16-bit integer")
    with open(path, "wb") as fh:
        fh.write(_VOL_HEADER.pack(VOL_MAGIC, FORMAT_VERSION, *ids.shape, pitch_um))
        fh.write(np.ascontiguousarray(ids, dtype="<u2").tobytes())


def read_volume_header(path: PathLike) -> tuple:
    with open(path, "rb") as fh:
        raw = fh.read(_VOL_HEADER.size)
    _check_magic(raw, VOL_MAGIC, path)
    if len(raw) < _VOL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, z, y, x, pitch = _VOL_HEADER.unpack(raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return (z, y, x), float(pitch)


def read_volume(path: PathLike, mmap: bool = True) -> tuple:
    """Returns (ids, pitch_um); ids is a read-only memory map unless ``mmap`` is False."""
    dims, pitch = read_volume_header(path)
    expected = _VOL_HEADER.size + 2 * int(np.prod(dims))
    size = Path(path).stat().st_size
    if size != expected:
        raise FormatError(f"{path}: {size} bytes, expected {expected}")
    ids = np.memmap(path, dtype="<u2", mode="r", offset=_VOL_HEADER.size, shape=dims)
    if not mmap:
        ids = np.array(ids, dtype=np.uint16)
    return ids, pitch


# -- label archives -----------------------------------------------------------------

def write_labels(path: PathLike, records: list) -> None:
    """``records``: (layer_index, mode, 16x16 grid, (count1, count2, count3)) tuples."""
    chunks = [LABEL_MAGIC, struct.pack("<I", len(records))]
    for layer, mode, grid, counts in records:
        grid = np.asarray(grid, dtype=np.uint8)
        if grid.shape != (16, 16):
            raise FormatError(f"label grid must be 16 x 16, got {grid.shape}")
        chunks.append(_LABEL_RECORD.pack(int(layer), int(mode), grid.tobytes(),
                                         *(int(c) for c in counts)))
    Path(path).write_bytes(b"".join(chunks))


def read_labels(path: PathLike) -> list:
    raw = Path(path).read_bytes()
    _check_magic(raw, LABEL_MAGIC, path)
    (count,) = struct.unpack_from("<I", raw, 4)
    if len(raw) != 8 + count * _LABEL_RECORD.size:
        raise FormatError(f"{path}: size does not match {count} records")
    out = []
    for i in range(count):
        layer, mode, cells, c1, c2, c3 = _LABEL_RECORD.unpack_from(raw, 8 + i * _LABEL_RECORD.size)
        grid = np.frombuffer(cells, dtype=np.uint8).reshape(16, 16).copy()
        out.append((layer, mode, grid, (c1, c2, c3)))
    return out


# -- PGM rasters -----------------------------------------------------------------

def write_pgm(path: PathLike, image: np.ndarray, maxval: Optional[int] = None) -> None:
    """Binary (P5) PGM; 16-bit samples are written most-significant byte first."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError("PGM images must be 2-D")
    if maxval is None:
        maxval = 255 if image.dtype == np.uint8 else 65535
    dtype = np.uint8 if maxval < 256 else ">u2"
    data = np.clip(image, 0, maxval).astype(dtype)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise FormatError(f"{path}: truncated PGM header")
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"{path}: truncated PGM header")
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    dtype = np.uint8 if maxval < 256 else ">u2"
    data = np.frombuffer(raw, dtype=dtype, offset=pos + 1)
    if data.size != w * h:
        raise FormatError(f"{path}: pixel count mismatch")
    return data.reshape(h, w).astype(np.uint8 if maxval < 256 else np.uint16)


def write_scaled_pgm(path: PathLike, values: np.ndarray, pixel_pitch_um: float, units: str,
                     scale: float, offset: float = 0.0) -> None:
    """Quantise ``values`` to 16 bits as ``round((v - offset) / scale)`` and write the
    decoding parameters to a sidecar ``<path>.txt``. NaN pixels are stored as 0."""
    values = np.asarray(values, dtype=np.float64)
    q = np.where(np.isfinite(values), np.rint((values - offset) / scale), 0.0)
    write_pgm(path, np.clip(q, 0, 65535).astype(np.uint16), maxval=65535)
    sidecar = {"pixel_pitch_um": repr(float(pixel_pitch_um)), "units": units,
               "scale": repr(float(scale)), "offset": repr(float(offset))}
    write_kv(Path(str(path) + ".txt"), sidecar)


def read_scaled_pgm(path: PathLike) -> tuple:
    """Returns (values, sidecar dict)."""
    meta = read_kv(Path(str(path) + ".txt"))
    raw = read_pgm(path).astype(np.float64)
    return raw * float(meta["scale"]) + float(meta["offset"]), meta


# -- pore tables -------------------------------------------------------------------

PORE_COLUMNS = ("id", "cz", "cy", "cx", "voxels", "esd_um")


def write_pore_csv(path: PathLike, table) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PORE_COLUMNS)
        for rec in table:
            cz, cy, cx = rec.centroid
            writer.writerow([rec.id, f"{cz:.6f}", f"{cy:.6f}", f"{cx:.6f}", rec.voxel_count,
                             f"{rec.esd_um:.6f}"])


def read_pore_rows(path: PathLike) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != PORE_COLUMNS:
            raise FormatError(f"{path}: unexpected pore table header {header}")
        return [(int(r[0]), (float(r[1]), float(r[2]), float(r[3])), int(r[4]), float(r[5]))
                for r in reader]


# -- flat key = value files ---------------------------------------------------------

def parse_kv(text: str, source: str = "<string>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        out[key] = value
    return out


def read_kv(path: PathLike) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_kv(text, str(path))


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def write_kv(path: PathLike, values: dict) -> None:
    Path(path).write_text(format_kv(values))
