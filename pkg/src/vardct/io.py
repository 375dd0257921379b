"""File formats: images, sinograms, PGM previews and trace CSVs.

Images and sinograms share one layout: an 8-byte magic, a little-endian
uint64 header length, a UTF-8 JSON header, then raw little-endian arrays.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .projector import ImageGrid
from .simulate import Sinogram

__all__ = [
    "config_hash",
    "write_image",
    "read_image",
    "write_sinogram",
    "read_sinogram",
    "write_pgm",
    "write_trace",
    "read_trace",
]

IMAGE_MAGIC = b"VARDIMG1"
SINO_MAGIC = b"VARDSIN1"


def config_hash(obj) -> str:
    """Stable SHA-256 of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _write(path, magic, header, arrays):
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes())


def _read(path, magic):
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise ValueError(f"{path}: unexpected file type")
    (size,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + size])
    return header, raw, 16 + size


def write_image(path, values, grid: ImageGrid, **meta) -> None:
    """Store a float64 field; multi-channel fields (e.g. 2p hyperparameters) are allowed."""
    values = np.ascontiguousarray(values, dtype="<f8")
    header = {"grid": grid.to_dict(), "length": int(values.size), **meta}
    _write(path, IMAGE_MAGIC, header, [values])


def read_image(path) -> tuple[np.ndarray, dict]:
    header, raw, off = _read(path, IMAGE_MAGIC)
    values = np.frombuffer(raw, "<f8", header["length"], off).copy()
    return values, header


def write_sinogram(path, sino: Sinogram, geometry: dict, **meta) -> None:
    counts = np.issubdtype(sino.y.dtype, np.integer)
    y = np.ascontiguousarray(sino.y, dtype="<i8" if counts else "<f8")
    header = {"n": sino.n, "geometry": geometry, "geometry_id": sino.geometry_id,
              "seed": sino.seed, "y_dtype": "int64" if counts else "float64", **meta}
    if np.all(sino.eta == sino.eta[0]):
        header["eta"] = float(sino.eta[0])
        arrays = [y]
    else:
        header["eta"] = "per-ray"
        arrays = [y, np.ascontiguousarray(sino.eta, dtype="<f8")]
    _write(path, SINO_MAGIC, header, arrays)


def read_sinogram(path) -> tuple[Sinogram, dict]:
    header, raw, off = _read(path, SINO_MAGIC)
    n = header["n"]
    dtype = "<i8" if header["y_dtype"] == "int64" else "<f8"
    y = np.frombuffer(raw, dtype, n, off).copy()
    if header["eta"] == "per-ray":
        eta = np.frombuffer(raw, "<f8", n, off + 8 * n).copy()
    else:
        eta = np.full(n, header["eta"])
    return Sinogram(y, eta, header["geometry_id"], header["seed"]), header


def write_pgm(path, values, grid: ImageGrid, window=(0.15, 0.35)) -> None:
    """16-bit binary PGM preview, linearly windowed."""
    lo, hi = window
    img = np.clip((np.asarray(values).reshape(grid.shape) - lo) / (hi - lo), 0.0, 1.0)
    data = np.round(img * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.nx} {grid.ny}\n65535\n".encode())
        fh.write(data.tobytes())


def write_trace(path, rows: list[dict], meta: dict) -> None:
    """CSV with a leading ``# {json}`` metadata line."""
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for r in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_trace(path) -> tuple[list[dict], dict]:
    with open(path) as fh:
        meta = json.loads(fh.readline()[2:])
        rows = [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]
    return rows, meta
