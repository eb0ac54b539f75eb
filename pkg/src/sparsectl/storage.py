"""Trajectory persistence (CSV and binary) with atomic writes.

Binary layout, little endian::

    8 bytes   magic b"SPCTRAJ1"
    int64     rows
    int64     cols
    float64   t0
    float64   dt
    int64     role (0 state, 1 adjoint, 2 control)
    float64   rows * cols values, row major

CSV files start with a ``# role=... dt=... shape=...`` comment line
followed by ``t,index,value`` (1D) or ``t,i,j,value`` (2D) records, one
per grid value, with 17 significant digits so values round-trip exactly.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile

import numpy as np

from .discretize import Trajectory

MAGIC = b"SPCTRAJ1"
_HEADER = struct.Struct("<8sqqddq")
_ROLES = ("state", "adjoint", "control")


class TrajectoryFormatError(ValueError):
    pass


def atomic_write(path, data, mode="w"):
    """Write ``data`` to a temporary file next to ``path`` and rename it."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def _t0(traj):
    return traj.dt if traj.role == "control" else 0.0


def to_bytes(traj: Trajectory) -> bytes:
    rows, cols = traj.values.shape
    head = _HEADER.pack(MAGIC, rows, cols, _t0(traj), traj.dt, _ROLES.index(traj.role))
    return head + np.ascontiguousarray(traj.values, dtype="<f8").tobytes()


def from_bytes(buf: bytes) -> Trajectory:
    if len(buf) < _HEADER.size:
        raise TrajectoryFormatError("file is shorter than the header")
    magic, rows, cols, _t0v, dt, role = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise TrajectoryFormatError("bad magic bytes")
    if rows < 0 or cols < 0 or not 0 <= role < len(_ROLES):
        raise TrajectoryFormatError("corrupt header")
    expected = _HEADER.size + 8 * rows * cols
    if len(buf) != expected:
        raise TrajectoryFormatError(f"expected {expected} bytes, found {len(buf)} (truncated or padded)")
    vals = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(float)
    try:
        return Trajectory(_ROLES[role], vals, dt)
    except ValueError as exc:
        raise TrajectoryFormatError(str(exc)) from None


def write_binary(path, traj: Trajectory):
    atomic_write(path, to_bytes(traj), mode="wb")


def read_binary(path) -> Trajectory:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def to_csv(traj: Trajectory, shape=None) -> str:
    """``shape`` is the 2D cell layout ``(nx, ny)``; ``None`` for 1D."""
    rows, cols = traj.values.shape
    if shape is not None and int(np.prod(shape)) != cols:
        raise ValueError(f"shape {shape} does not match {cols} columns")
    out = io.StringIO()
    shp = "x".join(str(s) for s in (shape or (cols,)))
    out.write(f"# role={traj.role} dt={traj.dt!r} shape={shp}\n")
    times = traj.times
    if shape is None or len(shape) == 1:
        out.write("t,index,value\n")
        for k in range(rows):
            t = f"{times[k]:.17g}"
            out.write("".join(f"{t},{i},{v:.17g}\n" for i, v in enumerate(traj.values[k])))
    else:
        ny = shape[1]
        out.write("t,i,j,value\n")
        for k in range(rows):
            t = f"{times[k]:.17g}"
            out.write("".join(f"{t},{i // ny},{i % ny},{v:.17g}\n" for i, v in enumerate(traj.values[k])))
    return out.getvalue()


def from_csv(text: str) -> Trajectory:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise TrajectoryFormatError("missing '# role=... dt=... shape=...' header")
    try:
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        role, dt = meta["role"], float(meta["dt"])
        shape = tuple(int(s) for s in meta["shape"].split("x"))
    except (KeyError, ValueError):
        raise TrajectoryFormatError("malformed CSV header") from None
    cols = int(np.prod(shape))
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if header not in (["t", "index", "value"], ["t", "i", "j", "value"]):
        raise TrajectoryFormatError("unexpected column names")
    try:
        values = [float(r[-1]) for r in reader if r]
    except (ValueError, IndexError):
        raise TrajectoryFormatError("non-numeric CSV entry") from None
    if cols == 0 or len(values) % cols:
        raise TrajectoryFormatError("CSV record count is not a multiple of the grid size")
    try:
        return Trajectory(role, np.array(values).reshape(-1, cols), dt)
    except ValueError as exc:
        raise TrajectoryFormatError(str(exc)) from None


def write_csv(path, traj: Trajectory, shape=None):
    atomic_write(path, to_csv(traj, shape))


def read_csv(path) -> Trajectory:
    with open(path) as fh:
        return from_csv(fh.read())
