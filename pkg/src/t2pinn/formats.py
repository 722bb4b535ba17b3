"""On-disk formats.

All three binary formats share one layout: a magic line, one line of compact
JSON header (keys sorted), then a little-endian payload.

``series`` (magic ``T2PINN-SERIES``)
    header ``{version, rows, cols, times_ms, intensity_scale, dtype: "<f4"}``;
    payload ``I * rows * cols`` float32, frame-major then row-major. Stored
    values times ``intensity_scale`` give the intensities.
``map`` (magic ``T2PINN-MAP``)
    header ``{version, rows, cols, kind, dtype: "<f4", mask: "u1"}``;
    payload ``rows * cols`` float32 values (NaN outside the mask) followed by
    ``rows * cols`` uint8 mask bytes (1 = inside).
``field`` (magic ``T2PINN-FIELD``)
    header ``{version, rows, cols, width, n, columns}``; payload an
    ``n x len(columns)`` float64 array, one row per voxel:
    ``row, col, t_scale, scale, t_lo, t_hi`` then the network trainables in
    the order ``w1, b1, w2 (row-major), b2, w3, b3, rho``.

Plain-text companions: a status grid (one line per image row, codes
separated by spaces) and CSV import (first row echo times in ms, then one row
of signals per voxel).
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .net import n_params, param_names
from .pipeline import MapKind, ParameterMap, TrainedField
from .signal import ImageSeries

VERSION = 1
SERIES_MAGIC = b"T2PINN-SERIES\n"
MAP_MAGIC = b"T2PINN-MAP\n"
FIELD_MAGIC = b"T2PINN-FIELD\n"
FIELD_COLUMNS = ("row", "col", "t_scale", "scale", "t_lo", "t_hi")


class FormatError(ValueError):
    """A file that does not match its documented layout."""


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    return magic + json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + payload


def _unpack(blob: bytes, magic: bytes, what: str) -> tuple[dict, bytes]:
    if not blob.startswith(magic):
        raise FormatError(f"not a {what} file (bad magic)")
    end = blob.find(b"\n", len(magic))
    if end < 0:
        raise FormatError(f"{what} file: header line is not terminated")
    try:
        header = json.loads(blob[len(magic) : end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{what} file: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{what} file: header must be a JSON object")
    if header.get("version") != VERSION:
        raise FormatError(f"{what} file: unsupported version {header.get('version')!r}")
    return header, blob[end + 1 :]


def _dims(header: dict, what: str) -> tuple[int, int]:
    try:
        rows, cols = int(header["rows"]), int(header["cols"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{what} file: header needs integer rows and cols") from None
    if rows < 1 or cols < 1:
        raise FormatError(f"{what} file: dims must be positive, got {rows}x{cols}")
    return rows, cols


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _write(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


# --------------------------------------------------------------------------- series


def series_to_bytes(series: ImageSeries, intensity_scale: float = 1.0) -> bytes:
    if not (intensity_scale > 0 and math.isfinite(intensity_scale)):
        raise ValueError(f"intensity_scale must be finite and > 0, got {intensity_scale}")
    rows, cols = series.dims
    header = {
        "version": VERSION,
        "rows": rows,
        "cols": cols,
        "times_ms": [float(t) for t in series.times],
        "intensity_scale": float(intensity_scale),
        "dtype": "<f4",
    }
    payload = (series.frames / intensity_scale).astype("<f4").tobytes()
    return _pack(SERIES_MAGIC, header, payload)


def series_from_bytes(blob: bytes) -> ImageSeries:
    header, payload = _unpack(blob, SERIES_MAGIC, "series")
    rows, cols = _dims(header, "series")
    times = header.get("times_ms")
    if not isinstance(times, list) or not times:
        raise FormatError("series file: header needs a non-empty times_ms list")
    t = np.asarray(times, dtype=np.float64)
    if t.size >= 2 and np.any(np.diff(t) <= 0):
        raise FormatError("series file: times_ms must be strictly increasing")
    expected = t.size * rows * cols * 4
    if len(payload) != expected:
        raise FormatError(
            f"series file: payload is {len(payload)} bytes, header implies {expected} "
            f"({t.size} frames of {rows}x{cols} float32)"
        )
    scale = float(header.get("intensity_scale", 1.0))
    frames = np.frombuffer(payload, dtype="<f4").reshape(t.size, rows, cols).astype(np.float64)
    if scale != 1.0:
        frames = frames * scale
    try:
        return ImageSeries(t, frames)
    except ValueError as exc:
        raise FormatError(f"series file: {exc}") from None


def write_series(path, series: ImageSeries, intensity_scale: float = 1.0) -> None:
    _write(path, series_to_bytes(series, intensity_scale))


def read_series(path) -> ImageSeries:
    return series_from_bytes(_read(path))


# --------------------------------------------------------------------------- maps


def map_to_bytes(m: ParameterMap) -> bytes:
    rows, cols = m.dims
    header = {"version": VERSION, "rows": rows, "cols": cols, "kind": m.kind.value, "dtype": "<f4", "mask": "u1"}
    values = np.where(m.mask, m.values, np.nan).astype("<f4")
    return _pack(MAP_MAGIC, header, values.tobytes() + m.mask.astype(np.uint8).tobytes())


def map_from_bytes(blob: bytes) -> ParameterMap:
    header, payload = _unpack(blob, MAP_MAGIC, "map")
    rows, cols = _dims(header, "map")
    try:
        kind = MapKind(header.get("kind"))
    except ValueError:
        raise FormatError(f"map file: unknown kind {header.get('kind')!r}") from None
    n = rows * cols
    if len(payload) != 5 * n:
        raise FormatError(f"map file: payload is {len(payload)} bytes, header implies {5 * n}")
    values = np.frombuffer(payload[: 4 * n], dtype="<f4").reshape(rows, cols).astype(np.float64)
    mask_bytes = np.frombuffer(payload[4 * n :], dtype=np.uint8).reshape(rows, cols)
    if np.any(mask_bytes > 1):
        raise FormatError("map file: mask bytes must be 0 or 1")
    return ParameterMap(values, mask_bytes.astype(bool), kind)


def write_map(path, m: ParameterMap) -> None:
    _write(path, map_to_bytes(m))


def read_map(path) -> ParameterMap:
    return map_from_bytes(_read(path))


# --------------------------------------------------------------------------- trained field


def field_to_bytes(f: TrainedField) -> bytes:
    columns = list(FIELD_COLUMNS) + param_names(f.width)
    header = {"version": VERSION, "rows": f.dims[0], "cols": f.dims[1], "width": f.width, "n": len(f), "columns": columns}
    table = np.column_stack([f.coords.astype(np.float64), f.t_scale, f.scale, f.t_lo, f.t_hi, f.params])
    return _pack(FIELD_MAGIC, header, table.reshape(len(f), len(columns)).astype("<f8").tobytes())


def field_from_bytes(blob: bytes) -> TrainedField:
    header, payload = _unpack(blob, FIELD_MAGIC, "field")
    rows, cols = _dims(header, "field")
    try:
        width, n = int(header["width"]), int(header["n"])
    except (KeyError, TypeError, ValueError):
        raise FormatError("field file: header needs integer width and n") from None
    if width < 1 or n < 0:
        raise FormatError(f"field file: bad width {width} or count {n}")
    ncol = len(FIELD_COLUMNS) + n_params(width)
    if len(payload) != 8 * n * ncol:
        raise FormatError(f"field file: payload is {len(payload)} bytes, header implies {8 * n * ncol}")
    table = np.frombuffer(payload, dtype="<f8").reshape(n, ncol).astype(np.float64)
    if not np.all(np.isfinite(table)):
        raise FormatError("field file: non-finite entries")
    coords = table[:, :2]
    if np.any(coords != np.round(coords)):
        raise FormatError("field file: voxel coordinates must be integers")
    try:
        return TrainedField((rows, cols), width, coords.astype(np.int64), table[:, 6:], *table[:, 2:6].T)
    except ValueError as exc:
        raise FormatError(f"field file: {exc}") from None


def write_field(path, f: TrainedField) -> None:
    _write(path, field_to_bytes(f))


def read_field(path) -> TrainedField:
    return field_from_bytes(_read(path))


# --------------------------------------------------------------------------- text formats


def status_to_text(status: np.ndarray) -> str:
    return "".join(" ".join(str(int(v)) for v in row) + "\n" for row in np.asarray(status))


def status_from_text(text: str) -> np.ndarray:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError("status grid: rows must be non-empty and of equal length")
    try:
        vals = [[int(v) for v in r] for r in rows]
    except ValueError:
        vals = None
    if vals is None or any(not 0 <= v <= 255 for r in vals for v in r):
        raise FormatError("status grid: entries must be integers in 0..255")
    return np.array(vals, dtype=np.uint8)


def series_from_csv(text: str) -> ImageSeries:
    """First row echo times in ms, then one row per voxel; dims become ``(n, 1)``."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise FormatError("csv: need a header row of echo times and at least one voxel row")
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError:
        raise FormatError("csv: entries must be numbers, one per echo in every row") from None
    times, signals = data[0], data[1:]
    try:
        return ImageSeries(times, signals.T[:, :, None])
    except ValueError as exc:
        raise FormatError(f"csv: {exc}") from None


def read_csv_series(path) -> ImageSeries:
    return series_from_csv(Path(path).read_text())


# --------------------------------------------------------------------------- image export


def window_level(m: ParameterMap, window: tuple[float, float] | None = None) -> np.ndarray:
    """Linear map of ``[lo, hi]`` onto 0..255, clipped; outside the mask is 0.

    Without an explicit window, ``lo``/``hi`` are the 1st and 99th percentiles
    of the masked-in values.
    """
    vals = m.masked()
    vals = vals[np.isfinite(vals)]
    if window is None:
        lo, hi = (float(np.percentile(vals, 1)), float(np.percentile(vals, 99))) if vals.size else (0.0, 1.0)
    else:
        lo, hi = map(float, window)
    if not hi > lo:
        hi = lo + 1.0
    scaled = np.clip((m.values - lo) / (hi - lo), 0.0, 1.0) * 255.0
    out = np.where(m.mask & np.isfinite(m.values), np.rint(scaled), 0.0)
    return out.astype(np.uint8)


def export_png(path, m: ParameterMap, window: tuple[float, float] | None = None) -> None:
    from PIL import Image

    Image.fromarray(window_level(m, window)).save(path, format="PNG")


__all__ = [
    "FormatError",
    "export_png",
    "field_from_bytes",
    "field_to_bytes",
    "map_from_bytes",
    "map_to_bytes",
    "read_csv_series",
    "read_field",
    "read_map",
    "read_series",
    "series_from_bytes",
    "series_from_csv",
    "series_to_bytes",
    "status_from_text",
    "status_to_text",
    "window_level",
    "write_field",
    "write_map",
    "write_series",
]
