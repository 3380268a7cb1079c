"""On-disk formats: JSON for configs and results, CSV for vectors and tables.

Every file is written to a temporary sibling and renamed into place, so an
interrupted write never leaves a partial file. Complex numbers are stored as
``[re, im]`` pairs and floats with 17 significant digits.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import SnapshotSet

TOOL_NAME = "sbldoa"
FLOAT_FORMAT = "%.16e"


def tool_version() -> str:
    from . import __version__
    return __version__


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON encoding of ``config``."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def provenance(config: dict, seed: Optional[int]) -> dict:
    return {"tool": TOOL_NAME, "version": tool_version(), "seed": seed,
            "config_sha256": config_hash(config)}


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(x: float) -> str:
    return FLOAT_FORMAT % x


def _header_lines(prov: Optional[dict]) -> str:
    if not prov:
        return ""
    return "".join(f"# {k}: {v}\n" for k, v in prov.items())


def write_json(path, payload: dict, prov: Optional[dict] = None) -> Path:
    doc = {"provenance": prov, **payload} if prov is not None else payload
    return atomic_write(path, json.dumps(doc, indent=1, sort_keys=False) + "\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# snapshots

def snapshots_to_json(snapshots: Sequence[SnapshotSet]) -> list:
    """Per frequency: N rows x L columns of [re, im] pairs."""
    return [[[[float(z.real), float(z.imag)] for z in row] for row in s.data] for s in snapshots]


def snapshots_from_json(frames: list) -> list[SnapshotSet]:
    out = []
    for f, frame in enumerate(frames):
        arr = np.asarray(frame, dtype=float)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"snapshot frame {f}: expected N x L x [re, im], got shape {arr.shape}")
        out.append(SnapshotSet(arr[..., 0] + 1j * arr[..., 1]))
    return out


def write_snapshots(path, snapshots: Sequence[SnapshotSet], frequencies: Sequence[float],
                    prov: Optional[dict] = None, extra: Optional[dict] = None) -> Path:
    payload = {**(extra or {}), "frequencies": list(map(float, frequencies)),
               "snapshots": snapshots_to_json(snapshots)}
    return write_json(path, payload, prov)


def read_snapshots(path) -> tuple[list[SnapshotSet], list[float], dict]:
    doc = read_json(path)
    if "snapshots" not in doc:
        raise ValueError(f"{path}: no 'snapshots' entry")
    frames = snapshots_from_json(doc["snapshots"])
    freqs = doc.get("frequencies", [1.0] * len(frames))
    if len(freqs) != len(frames):
        raise ValueError(f"{path}: {len(freqs)} frequencies for {len(frames)} snapshot sets")
    return frames, [float(f) for f in freqs], doc


# CSV

def _csv_text(header: Sequence[str], rows: Iterable[Sequence], prov: Optional[dict]) -> str:
    buf = _io.StringIO()
    buf.write(_header_lines(prov))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_spectrum_csv(path, angles, values, prov: Optional[dict] = None) -> Path:
    angles = np.asarray(angles, dtype=float)
    values = np.asarray(values, dtype=float)
    if angles.shape != values.shape:
        raise ValueError("angles and values differ in length")
    rows = ((float(a), float(v)) for a, v in zip(angles, values))
    return atomic_write(path, _csv_text(("angle_deg", "value"), rows, prov))


def _data_lines(path) -> list[str]:
    with open(path, newline="") as fh:
        return [line for line in fh if not line.startswith("#")]


def read_spectrum_csv(path) -> tuple[np.ndarray, np.ndarray]:
    reader = csv.reader(_data_lines(path))
    header = next(reader)
    if header != ["angle_deg", "value"]:
        raise ValueError(f"{path}: unexpected header {header}")
    rows = [(float(a), float(v)) for a, v in reader]
    arr = np.array(rows, dtype=float).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def read_provenance(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(": ")
            out[key] = value
    return out


def write_matrix_csv(path, matrix: np.ndarray, row_labels=None, prov: Optional[dict] = None) -> Path:
    """Complex matrix with interleaved ``re_j, im_j`` columns."""
    M = np.asarray(matrix, dtype=complex)
    header = ["row"] + [f"{part}_{j}" for j in range(M.shape[1]) for part in ("re", "im")]
    labels = range(M.shape[0]) if row_labels is None else row_labels
    rows = ([lab] + [float(x) for z in row for x in (z.real, z.imag)] for lab, row in zip(labels, M))
    return atomic_write(path, _csv_text(header, rows, prov))


def read_matrix_csv(path) -> np.ndarray:
    reader = csv.reader(_data_lines(path))
    next(reader)
    data = np.array([[float(x) for x in row[1:]] for row in reader], dtype=float)
    return data[:, 0::2] + 1j * data[:, 1::2]


def write_table_csv(path, header: Sequence[str], rows: Iterable[Sequence], prov: Optional[dict] = None) -> Path:
    return atomic_write(path, _csv_text(header, rows, prov))


def metrics_rows(table) -> tuple[list[str], list[list]]:
    header = ["method", "sweep_parameter", "sweep_value", "runs", "failures", "short_runs",
              "rmse_weakest_deg", "band_lo_deg", "band_hi_deg", "near_fraction",
              "aliased_mass_fraction"]
    rows = []
    for r in table.rows:
        rows.append([r.method, r.sweep_parameter or "", "" if r.sweep_value is None else float(r.sweep_value),
                     r.runs, r.failures, r.short_runs, float(r.rmse_weakest_deg),
                     float(r.percentile_band[0]), float(r.percentile_band[1]),
                     float(r.near_fraction), float(r.aliased_mass_fraction)])
    return header, rows


def histogram_rows(table) -> tuple[list[str], list[list]]:
    cols = [f"{r.method}@{'' if r.sweep_value is None else r.sweep_value}" for r in table.rows]
    header = ["angle_deg"] + cols
    rows = [[float(a)] + [int(r.histogram[i]) for r in table.rows] for i, a in enumerate(table.angles)]
    return header, rows
