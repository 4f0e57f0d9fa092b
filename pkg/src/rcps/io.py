"""Tensor file ingestion/emission, heatmap rendering, and report serialization.

The tensor format is .npy version 1.0 restricted to C-order little-endian
float32/float64; the reader is strict and reports the byte offset of any
malformed field. Heatmaps are written as minimal 8-bit RGB PNGs (required
chunks only, fixed zlib level) so identical inputs produce byte-identical
files. Reports serialize to canonical JSON: sorted keys, floats at 17
significant digits, trailing newline.
"""

from __future__ import annotations

import ast
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .core import ImageTensor
from .exceptions import ArgumentError, FormatError

__all__ = [
    "Colormap",
    "DEFAULT_COLORMAP",
    "read_tensor",
    "write_tensor",
    "render_heatmap",
    "write_report",
    "write_histogram_csv",
    "canonical_json",
]

NPY_MAGIC = b"\x93NUMPY"
NPY_ALIGN = 64
_DTYPES = {"f32": "<f4", "f64": "<f8"}


def read_tensor(path, standardized: bool = False) -> ImageTensor:
    """Load a 2-D image or 3-D stack from a version-1.0 .npy file.

    float32 payloads are promoted to float64 in memory; the stored bytes are
    otherwise taken verbatim (C-order, little-endian only).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != NPY_MAGIC:
        raise FormatError(f"bad magic {data[:6]!r}, expected {NPY_MAGIC!r}", offset=0)
    if data[6:8] != b"\x01\x00":
        raise FormatError(
            f"unsupported npy version {tuple(data[6:8])}, expected (1, 0)", offset=6
        )
    if len(data) < 10:
        raise FormatError("truncated before header length", offset=8)
    (header_len,) = struct.unpack("<H", data[8:10])
    header_end = 10 + header_len
    if len(data) < header_end:
        raise FormatError(
            f"truncated header: declared {header_len} bytes, "
            f"{len(data) - 10} available",
            offset=10,
        )
    try:
        header = ast.literal_eval(data[10:header_end].decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"unparseable header dict: {exc}", offset=10)
    if not isinstance(header, dict) or set(header) != {
        "descr",
        "fortran_order",
        "shape",
    }:
        raise FormatError(f"malformed header keys: {sorted(header)}", offset=10)
    descr = header["descr"]
    if descr not in _DTYPES.values():
        raise FormatError(
            f"unsupported dtype {descr!r}; only little-endian f32/f64", offset=10
        )
    if header["fortran_order"]:
        raise FormatError(
            "fortran_order=True is not supported; re-save in C order", offset=10
        )
    shape = header["shape"]
    if (
        not isinstance(shape, tuple)
        or len(shape) not in (2, 3)
        or any((not isinstance(s, int)) or s < 1 for s in shape)
    ):
        raise FormatError(
            f"shape {shape!r} unsupported; need 2-D image or 3-D stack", offset=10
        )
    item = 4 if descr == "<f4" else 8
    expected = int(np.prod(shape)) * item
    actual = len(data) - header_end
    if actual != expected:
        raise FormatError(
            f"payload has {actual} bytes, expected {expected} for shape {shape}",
            offset=header_end,
        )
    arr = np.frombuffer(data, dtype=descr, count=int(np.prod(shape)), offset=header_end)
    return ImageTensor(arr.astype(np.float64).reshape(shape), standardized=standardized)


def _npy_header(descr: str, shape: tuple) -> bytes:
    body = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (
        descr,
        str(shape),
    )
    raw = body.encode("latin1")
    prefix = len(NPY_MAGIC) + 2 + 2
    pad = -(prefix + len(raw) + 1) % NPY_ALIGN
    raw += b" " * pad + b"\n"
    return NPY_MAGIC + b"\x01\x00" + struct.pack("<H", len(raw)) + raw


def write_tensor(tensor, path, dtype: str = "f64") -> None:
    """Write a 2-D or 3-D tensor as .npy v1.0 with 64-byte header alignment."""
    if dtype not in _DTYPES:
        raise ArgumentError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    arr = tensor.data if isinstance(tensor, ImageTensor) else np.asarray(tensor)
    if arr.ndim not in (2, 3):
        raise ArgumentError(
            f"only 2-D images or 3-D stacks can be written, got ndim={arr.ndim}"
        )
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(_npy_header(_DTYPES[dtype], arr.shape))
            fh.write(payload)
    except OSError as exc:
        raise ArgumentError(f"cannot write tensor to {path}: {exc}")


@dataclass(frozen=True)
class Colormap:
    """Piecewise-linear RGB map over [0, 1], defined by control points."""

    stops: tuple

    def __post_init__(self):
        ts = [t for t, _ in self.stops]
        if len(ts) < 2 or ts[0] != 0.0 or ts[-1] != 1.0 or sorted(ts) != ts:
            raise ArgumentError(
                "control points must ascend from t=0 to t=1, got "
                + repr(ts)
            )

    def rgb(self, t: np.ndarray) -> np.ndarray:
        t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
        ts = np.array([p for p, _ in self.stops])
        channels = [
            np.interp(t, ts, np.array([c[i] for _, c in self.stops], dtype=np.float64))
            for i in range(3)
        ]
        out = np.stack(channels, axis=-1)
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# Diverging blue -> white -> red: cold pixels are confident, hot ones are not.
DEFAULT_COLORMAP = Colormap(((0.0, (59, 76, 192)), (0.5, (221, 221, 221)), (1.0, (180, 4, 38))))


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload))
    )


def write_png(path, rgb: np.ndarray) -> None:
    """Minimal PNG writer: IHDR + IDAT + IEND, no filtering, fixed compression."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ArgumentError(f"need (M, N, 3) uint8 pixels, got {rgb.shape} {rgb.dtype}")
    height, width = rgb.shape[:2]
    raw = b"".join(b"\x00" + rgb[row].tobytes() for row in range(height))
    ihdr = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(_png_chunk(b"IHDR", ihdr))
        fh.write(_png_chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(_png_chunk(b"IEND", b""))


def render_heatmap(sizes, path, colormap: Colormap = DEFAULT_COLORMAP, scale="per-image"):
    """Render per-pixel interval sizes through a colormap to a PNG.

    ``scale`` is either "per-image" (min-max over this image; a constant field
    maps to t=0, i.e. fully confident) or a fixed (lo, hi) pair for
    cross-image comparability.
    """
    arr = sizes.data if isinstance(sizes, ImageTensor) else np.asarray(sizes, dtype=np.float64)
    if arr.ndim != 2:
        raise ArgumentError(f"sizes must be 2-D, got shape {arr.shape}")
    if arr.min() < 0.0:
        raise ArgumentError("interval sizes must be >= 0")
    if scale == "per-image":
        lo, hi = float(arr.min()), float(arr.max())
        t = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    else:
        lo, hi = float(scale[0]), float(scale[1])
        if hi <= lo:
            raise ArgumentError(f"fixed scale needs lo < hi, got ({lo}, {hi})")
        t = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    write_png(path, colormap.rgb(t))


def _canon(obj) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return repr(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not np.isfinite(v):
            raise ArgumentError("refusing to serialize non-finite number in report")
        if v == 0.0:
            v = 0.0  # fold -0.0 so reserialization is stable
        return format(v, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if any(not isinstance(k, str) for k in obj):
            raise ArgumentError("report keys must be strings")
        inner = ",".join(f"{json.dumps(k)}:{_canon(obj[k])}" for k in sorted(obj))
        return "{" + inner + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        items = obj.tolist() if isinstance(obj, np.ndarray) else obj
        return "[" + ",".join(_canon(v) for v in items) + "]"
    raise ArgumentError(f"cannot serialize {type(obj).__name__} in report")


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, 17-significant-digit floats, LF ending."""
    return _canon(obj) + "\n"


def write_report(report, path) -> None:
    """Serialize a report object (anything with to_dict, or a plain dict)."""
    payload = report.to_dict() if hasattr(report, "to_dict") else report
    text = canonical_json(payload)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise ArgumentError(f"cannot write report to {path}: {exc}")


def write_histogram_csv(edges, counts, path) -> None:
    """Histogram as CSV rows (bin_lo, bin_hi, count), LF line endings."""
    edges = np.asarray(edges, dtype=np.float64)
    counts = np.asarray(counts)
    if edges.size != counts.size + 1:
        raise ArgumentError(
            f"need len(edges) == len(counts) + 1, got {edges.size} and {counts.size}"
        )
    lines = ["bin_lo,bin_hi,count"]
    for i in range(counts.size):
        lines.append(
            f"{format(edges[i], '.17g')},{format(edges[i + 1], '.17g')},{int(counts[i])}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
