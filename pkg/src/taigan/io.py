"""On-disk formats: DPV1 dynamic volumes, TGF1 deformation fields and the CSV reports.

All binary formats are little-endian. DPV1 stores voxel data as float32, so a
write-read round trip returns exactly the float32 rounding of the input and a
second write reproduces the first file byte for byte.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .motion import BSplineField
from .phantom import DynamicSeries

DPV_MAGIC = b"DPV1"
DPV_VERSION = 1
TGF_MAGIC = b"TGF1"
TAC_COLUMNS = ("frame_start", "duration", "rvbp", "lvbp", "myo")
QUANT_COLUMNS = ("study_id", "arm", "K1", "k2", "MBF", "wss", "pct_diff_K1", "pct_diff_MBF")

_DPV_HEAD = struct.Struct("<4sH3I3fI")
_TGF_HEAD = struct.Struct("<4s3If")


class FormatError(ValueError):
    """A file does not match the expected layout."""


def _read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: no such file") from None


# ----------------------------------------------------------------- DPV1


def write_dpv(path: str | Path, series: DynamicSeries, voxel_mm: Sequence[float] = (1.0, 1.0, 1.0)) -> None:
    frames = np.asarray(series.frames)
    nf, x, y, z = frames.shape
    head = _DPV_HEAD.pack(DPV_MAGIC, DPV_VERSION, x, y, z, *map(float, voxel_mm), nf)
    timing = np.stack([series.frame_start, series.frame_duration], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(timing.tobytes())
        fh.write(frames.astype("<f4").tobytes())


def read_dpv(path: str | Path) -> tuple[DynamicSeries, tuple[float, float, float]]:
    """``(series, voxel_mm)`` from a DPV1 file."""
    raw = _read_bytes(path)
    if len(raw) < _DPV_HEAD.size:
        raise FormatError(f"{path}: truncated DPV1 header")
    magic, version, x, y, z, vx, vy, vz, nf = _DPV_HEAD.unpack_from(raw)
    if magic != DPV_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {DPV_MAGIC!r}")
    if version != DPV_VERSION:
        raise FormatError(f"{path}: unsupported DPV version {version}")
    n_time, n_vox = 2 * nf, nf * x * y * z
    expected = _DPV_HEAD.size + 4 * (n_time + n_vox)
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} bytes, header implies {expected}")
    timing = np.frombuffer(raw, "<f4", n_time, _DPV_HEAD.size).reshape(nf, 2).astype(np.float64)
    data = np.frombuffer(raw, "<f4", n_vox, _DPV_HEAD.size + 4 * n_time).reshape(nf, x, y, z)
    series = DynamicSeries(data.astype(np.float64), timing[:, 0], timing[:, 1])
    return series, (float(vx), float(vy), float(vz))


def write_volume(path: str | Path, volume: np.ndarray, voxel_mm: Sequence[float] = (1.0, 1.0, 1.0)) -> None:
    """A single volume as a one-frame DPV1 file (start 0, duration 1)."""
    write_dpv(path, DynamicSeries(np.asarray(volume)[None], [0.0], [1.0]), voxel_mm)


def read_volume(path: str | Path) -> np.ndarray:
    series, _ = read_dpv(path)
    if series.num_frames != 1:
        raise FormatError(f"{path}: expected a single-frame volume, found {series.num_frames} frames")
    return series.frames[0]


def read_labels(path: str | Path) -> np.ndarray:
    v = read_volume(path)
    labels = np.rint(v).astype(np.int64)
    if not np.array_equal(labels, v) or labels.min() < 0 or labels.max() > 3:
        raise FormatError(f"{path}: label volume must hold integers in 0..3")
    return labels


# ----------------------------------------------------------------- TGF1


def write_tgf(path: str | Path, field: BSplineField) -> None:
    with open(path, "wb") as fh:
        fh.write(_TGF_HEAD.pack(TGF_MAGIC, *field.grid, float(field.spacing)))
        fh.write(field.coeffs.astype("<f4").tobytes())


def read_tgf(path: str | Path) -> BSplineField:
    raw = _read_bytes(path)
    if len(raw) < _TGF_HEAD.size:
        raise FormatError(f"{path}: truncated TGF1 header")
    magic, n0, n1, n2, spacing = _TGF_HEAD.unpack_from(raw)
    if magic != TGF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TGF_MAGIC!r}")
    count = n0 * n1 * n2 * 3
    if len(raw) != _TGF_HEAD.size + 4 * count:
        raise FormatError(f"{path}: size {len(raw)} bytes does not match grid {(n0, n1, n2)}")
    coeffs = np.frombuffer(raw, "<f4", count, _TGF_HEAD.size).reshape(n0, n1, n2, 3)
    return BSplineField(coeffs.astype(np.float64), float(spacing))


# ----------------------------------------------------------------- CSV


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path: str | Path, required: Sequence[str] = ()) -> list[dict[str, str]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in required if c not in header]
            if missing:
                raise FormatError(f"{path}: header lacks column(s) {', '.join(missing)}")
            return list(reader)
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: no such file") from None


def write_tacs(path: str | Path, starts, durations, tacs: dict[str, np.ndarray]) -> None:
    rows = [
        dict(frame_start=float(s), duration=float(d), **{k: float(tacs[k][i]) for k in ("rvbp", "lvbp", "myo")})
        for i, (s, d) in enumerate(zip(starts, durations))
    ]
    write_csv(path, TAC_COLUMNS, rows)


def read_tacs(path: str | Path) -> dict[str, np.ndarray]:
    rows = read_csv(path, TAC_COLUMNS)
    try:
        return {c: np.array([float(r[c]) for r in rows]) for c in TAC_COLUMNS}
    except ValueError as e:
        raise FormatError(f"{path}: non-numeric TAC entry ({e})") from None


def write_json(path: str | Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
