"""On-disk formats: NPY v1.0 float32 arrays, 6-decimal CSV, JSON manifests.

All writes are atomic (temp file in the target directory, then rename) so an
interrupted run never leaves a truncated artifact behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

__all__ = [
    "write_npy_atomic",
    "read_npy_2d",
    "write_angles_csv_atomic",
    "read_angles_csv",
    "write_trace_csv_atomic",
    "write_json_atomic",
    "sha256_file",
]

TRACE_COLUMNS = ("k", "objective", "red_penalty", "snr_db", "angle_rmse_deg", "elapsed_ms")


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_npy_atomic(path, array) -> None:
    """Write a little-endian float32 C-order NPY v1.0 file."""
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    import io as _io

    buf = _io.BytesIO()
    np.lib.format.write_array(buf, arr, version=(1, 0))
    _atomic_write(Path(path), buf.getvalue())


def read_npy_2d(path) -> np.ndarray:
    arr = np.load(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a 2-D array, got shape {arr.shape}")
    return arr.astype(np.float64)


def _fmt(v: float) -> str:
    if v is None:
        return ""
    if np.isposinf(v):
        return "inf"
    if np.isneginf(v):
        return "-inf"
    return f"{v:.6f}"


def write_angles_csv_atomic(path, angles_deg) -> None:
    lines = ["angle_deg"]
    lines += [_fmt(float(a)) for a in np.asarray(angles_deg, dtype=np.float64)]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_angles_csv(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "angle_deg":
        raise ValueError(f"{path}: expected an 'angle_deg' CSV header")
    return np.array([float(v) for v in lines[1:]], dtype=np.float64)


def write_trace_csv_atomic(path, trace_rows) -> None:
    """Serialize TraceRow records; absent metrics stay as empty cells."""
    lines = [",".join(TRACE_COLUMNS)]
    for r in trace_rows:
        lines.append(",".join([
            str(r.k),
            _fmt(r.objective),
            _fmt(r.red_penalty),
            _fmt(r.snr_db),
            _fmt(r.angle_rmse_deg),
            f"{r.elapsed_ms:.3f}",
        ]))
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def write_json_atomic(path, obj) -> None:
    _atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
