"""Result files: CSV with '#' metadata lines, binary dense states and JSON."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

STATE_MAGIC = b"PSMSTATE"
_HEADER = struct.Struct("<8sQ")  # 16 bytes: magic, dimension


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path: str | Path, columns: Mapping[str, np.ndarray], meta: Mapping[str, object] = ()) -> Path:
    """Write equal-length columns; complex columns expand into re_<name>, im_<name>."""
    path = Path(path)
    names, data = [], []
    for name, values in columns.items():
        v = np.asarray(values)
        if np.iscomplexobj(v):
            names += [f"re_{name}", f"im_{name}"]
            data += [v.real, v.imag]
        else:
            names.append(name)
            data.append(v.astype(float))
    lengths = {len(d) for d in data}
    if len(lengths) > 1:
        raise ValueError(f"columns have different lengths {sorted(lengths)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        for k, v in dict(meta).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*data):
            w.writerow([_fmt(x) for x in row])
    return path


def read_csv(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Return (metadata, columns); re_/im_ pairs are recombined into complex arrays."""
    meta, rows = {}, []
    with Path(path).open() as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(":")
                meta[key.strip()] = value.strip()
            else:
                rows.append(line)
    reader = csv.reader(rows)
    header = next(reader)
    body = np.array([[float(x) for x in r] for r in reader if r]).reshape(-1, len(header))
    cols: dict[str, np.ndarray] = {}
    for i, name in enumerate(header):
        if name.startswith("im_") and "re_" + name[3:] in header:
            continue
        if name.startswith("re_") and "im_" + name[3:] in header:
            j = header.index("im_" + name[3:])
            cols[name[3:]] = body[:, i] + 1j * body[:, j]
        else:
            cols[name] = body[:, i]
    return meta, cols


def write_state(path: str | Path, rho: np.ndarray) -> Path:
    """16-byte header (magic, dim) then row-major little-endian float64 re/im pairs."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("state must be a square matrix")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = np.empty(2 * rho.size, dtype="<f8")
    flat[0::2] = rho.real.ravel()
    flat[1::2] = rho.imag.ravel()
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(STATE_MAGIC, rho.shape[0]))
        fh.write(flat.tobytes())
    return path


def read_state(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("state file too short")
    magic, dim = _HEADER.unpack_from(raw)
    if magic != STATE_MAGIC:
        raise ValueError("not a state file (bad magic)")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if flat.size != 2 * dim * dim:
        raise ValueError(f"state file holds {flat.size} values, expected {2 * dim * dim}")
    return (flat[0::2] + 1j * flat[1::2]).reshape(dim, dim)


def _jsonable(obj):
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.complexfloating):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path
