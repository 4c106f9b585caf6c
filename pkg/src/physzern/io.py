"""File formats shared by the pipeline.

* raw grids: 16-byte header (``b"ABR1"``, u32 rows, u32 cols, u32 reserved)
  followed by little-endian float64 samples in row-major order;
* images: binary 16-bit PGM (P5), ``value = round(pixel * 65535)``;
* visualizations: 16-bit PGM with linear min-max scaling and a JSON sidecar;
* lens sets: CSV with header ``lens_id,a2,...,a37``;
* records: JSON lines.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .zernike import NOLL_INDICES, N_COEFFS

GRID_MAGIC = b"ABR1"
_HEADER = struct.Struct("<4sIII")
LENS_COLUMNS = ["lens_id"] + [f"a{j}" for j in NOLL_INDICES]


def write_grid(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError(f"raw grids are 2-D, got shape {values.shape}")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(GRID_MAGIC, rows, cols, 0))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated grid header")
    magic, rows, cols, _ = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)


def write_pgm16(path, image: np.ndarray) -> None:
    """Write an image in [0, 1] as 16-bit binary PGM (values are clipped)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {image.shape}")
    q = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (8- or 16-bit) into floats in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return arr.reshape(h, w).astype(np.float64) / maxval


def export_visualization(path, values: np.ndarray) -> dict:
    """Min-max scale a map to 16-bit PGM; the scaling goes to ``<path>.json``."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    scaled = (values - lo) / span if span > 0 else np.zeros_like(values)
    write_pgm16(path, scaled)
    meta = {"min": lo, "max": hi, "encoding": "value = min + pixel/65535 * (max - min)"}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


def write_lens_csv(path, lenses) -> None:
    """Write ``LensRecord``-like objects (``lens_id``, ``coeffs``)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LENS_COLUMNS)
        for lens in lenses:
            writer.writerow([lens.lens_id] + [repr(float(c)) for c in lens.coeffs])


def read_lens_rows(path) -> list[tuple[str, np.ndarray]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LENS_COLUMNS:
            raise ValueError(f"{path}: expected header lens_id,a2..a37")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != N_COEFFS + 1:
                raise ValueError(f"{path}:{lineno}: expected {N_COEFFS + 1} columns, got {len(row)}")
            rows.append((row[0], np.array([float(v) for v in row[1:]])))
    return rows


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
