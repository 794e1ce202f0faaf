"""Intensity grids, bilinear sampling, matching windows and ZNCC.

Pixel ``(x, y)`` addresses column ``x`` and row ``y``; integer coordinates hit
pixel centers exactly.

On-disk formats
---------------
* PGM: binary ``P5``, maxval <= 255 (8 bit) or <= 65535 (16 bit, big endian).
* F32: 16-byte header then ``height * width`` little-endian float32 values,
  row-major. Header = 8-byte magic ``b"SBLKF32\\0"``, width (uint32 LE),
  height (uint32 LE).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import SamplingError, SceneFormatError, UndefinedCorrelationError
from .geo_rpc import ImagePoint

F32_MAGIC = b"SBLKF32\x00"
ZERO_VARIANCE = 1e-12


@dataclass(frozen=True, eq=False)
class ImageRaster:
    image_id: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"raster must be a non-empty 2-D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster intensities must be finite")
        if arr is self.data:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class MatchWindow:
    center: ImagePoint
    w: int
    samples: np.ndarray

    def __post_init__(self):
        if self.w < 3 or self.w % 2 == 0:
            raise ValueError(f"window size must be odd and >= 3, got {self.w}")
        s = np.asarray(self.samples, dtype=float).reshape(self.w, self.w)
        if not np.all(np.isfinite(s)):
            raise ValueError("window samples must be finite")
        object.__setattr__(self, "samples", s)


def sample_bilinear(r: ImageRaster, q: ImagePoint) -> float:
    out = kernels.sample_points(r.data, np.array([float(q[0])]), np.array([float(q[1])]))
    if out is None:
        raise SamplingError(f"({q[0]}, {q[1]}) outside image {r.image_id} ({r.width}x{r.height})")
    return float(out[0])


def gradient_at(r: ImageRaster, q: ImagePoint) -> tuple[float, float]:
    """Central differences (1 px step) of the bilinear surface."""
    x, y = float(q[0]), float(q[1])
    xs = np.array([x + 1.0, x - 1.0, x, x])
    ys = np.array([y, y, y + 1.0, y - 1.0])
    v = kernels.sample_points(r.data, xs, ys)
    if v is None:
        raise SamplingError(f"gradient at ({x}, {y}) needs a 1 px margin inside image {r.image_id}")
    return 0.5 * (v[0] - v[1]), 0.5 * (v[2] - v[3])


def window_offsets(w: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened row-major offsets ``(dx, dy)`` of a ``w x w`` window."""
    half = w // 2
    d = np.arange(-half, half + 1, dtype=float)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    return dx.ravel().copy(), dy.ravel().copy()


def extract_window(r: ImageRaster, center: ImagePoint, w: int) -> MatchWindow:
    if w < 3 or w % 2 == 0:
        raise ValueError(f"window size must be odd and >= 3, got {w}")
    dx, dy = window_offsets(w)
    vals = kernels.sample_points(r.data, float(center[0]) + dx, float(center[1]) + dy)
    if vals is None:
        raise SamplingError(f"{w}x{w} window at ({center[0]:.2f}, {center[1]:.2f}) leaves image {r.image_id}")
    return MatchWindow(ImagePoint(float(center[0]), float(center[1])), w, vals.reshape(w, w))


def _centered(samples):
    s = np.asarray(samples, dtype=float).ravel()
    mean = s.mean()
    c = s - mean
    sd = np.sqrt(c @ c / s.size)
    if sd <= ZERO_VARIANCE * max(1.0, abs(mean)):
        raise UndefinedCorrelationError("window has zero intensity variance")
    return c, sd


def zncc_samples(a, b) -> float:
    ca, sa = _centered(a)
    cb, sb = _centered(b)
    if ca.size != cb.size:
        raise ValueError("windows differ in size")
    v = float(ca @ cb) / (ca.size * sa * sb)
    return min(1.0, max(-1.0, v))


def zncc(a: MatchWindow, b: MatchWindow) -> float:
    if a.w != b.w:
        raise ValueError(f"window sizes differ ({a.w} vs {b.w})")
    return zncc_samples(a.samples, b.samples)


def window_stats(samples) -> tuple[float, float]:
    """Mean and population standard deviation; raises on zero variance."""
    s = np.asarray(samples, dtype=float).ravel()
    _, sd = _centered(s)
    return float(s.mean()), float(sd)


def normalize_window_set(windows: list[MatchWindow]) -> list[MatchWindow]:
    out = []
    for win in windows:
        c, sd = _centered(win.samples)
        out.append(MatchWindow(win.center, win.w, (c / sd).reshape(win.w, win.w)))
    return out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _pgm_tokens(buf: bytes, path):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneFormatError("truncated PGM header", path)
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path, image_id: int = 0) -> ImageRaster:
    buf = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(buf, path)
    if tokens[0] != b"P5":
        raise SceneFormatError(f"not a binary PGM (magic {tokens[0]!r})", path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise SceneFormatError("bad PGM header", path) from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise SceneFormatError("bad PGM dimensions", path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(buf) - pos < need:
        raise SceneFormatError("truncated PGM data", path)
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    return ImageRaster(image_id, data.reshape(height, width).astype(np.float64))


def write_pgm(path, raster: ImageRaster, bits: int = 16) -> None:
    """Quantizes (rounds and clips) to 8 or 16 bit."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    q = np.clip(np.rint(raster.data), 0, maxval)
    dtype = np.dtype("u1") if bits == 8 else np.dtype(">u2")
    header = f"P5\n{raster.width} {raster.height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + q.astype(dtype).tobytes())


def read_f32(path, image_id: int = 0) -> ImageRaster:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:8] != F32_MAGIC:
        raise SceneFormatError("not an F32 raster (bad magic)", path)
    width, height = struct.unpack("<II", buf[8:16])
    need = 16 + 4 * width * height
    if width < 1 or height < 1 or len(buf) != need:
        raise SceneFormatError(f"F32 size mismatch: {len(buf)} bytes for {width}x{height}", path)
    data = np.frombuffer(buf, dtype="<f4", offset=16).reshape(height, width)
    return ImageRaster(image_id, data.astype(np.float64))


def write_f32(path, raster: ImageRaster) -> None:
    header = F32_MAGIC + struct.pack("<II", raster.width, raster.height)
    Path(path).write_bytes(header + raster.data.astype("<f4").tobytes())


def read_raster(path, image_id: int = 0) -> ImageRaster:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path, image_id)
    if suffix == ".f32":
        return read_f32(path, image_id)
    raise SceneFormatError(f"unknown raster extension {suffix!r}", path)
