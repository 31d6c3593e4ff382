"""Image containers, PGM I/O, preprocessing, thresholding and porosity.

Images are thin wrappers around 2D numpy arrays indexed ``[row, col]``.
Pixel ``(x, y)`` in the public API means column ``x``, row ``y``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

import numpy as np

from .errors import (BoundsError, DegenerateHistogramError, FormatError, ShapeError, TruncatedError,
                     UnsupportedDepthError)

PathLike = Union[str, os.PathLike]


def round_half_away(x):
    """Round to nearest integer, halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


class _Raster:
    dtype: type = np.float64
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=self.dtype)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError(f"expected a non-empty 2D array, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        return type(self) is type(other) and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((type(self).__name__, self.data.shape, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class GrayImage(_Raster):
    """8-bit grayscale raster."""

    data: np.ndarray
    dtype = np.uint8


@dataclass(frozen=True, eq=False)
class FloatImage(_Raster):
    """Real-valued raster, normally in [0, 1]."""

    data: np.ndarray
    dtype = np.float64


@dataclass(frozen=True, eq=False)
class BinaryImage(_Raster):
    """Two-phase raster; True marks pore, False solid."""

    data: np.ndarray
    dtype = np.bool_

    def complement(self) -> "BinaryImage":
        return BinaryImage(~self.data)

    def to_gray(self) -> GrayImage:
        """Pores rendered white (255), solid black (0)."""
        return GrayImage(self.data.astype(np.uint8) * 255)


@dataclass(frozen=True)
class CropRect:
    x0: int
    y0: int
    w: int
    h: int


# ---------------------------------------------------------------------------
# PGM I/O


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return buf[start:pos], pos


def load_pgm(path: PathLike) -> GrayImage:
    """Read a binary (P5) PGM with maxval 255."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"{path}: malformed PGM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{path}: invalid dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedDepthError(f"{path}: maxval {maxval} unsupported, only 255")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after maxval")
    pos += 1
    payload = buf[pos:pos + width * height]
    if len(payload) != width * height:
        raise TruncatedError(f"{path}: truncated payload, expected {width * height} bytes, got {len(payload)}")
    return GrayImage(np.frombuffer(payload, dtype=np.uint8).reshape(height, width))


def save_pgm(img: Union[GrayImage, BinaryImage], path: PathLike) -> None:
    """Write ``P5\\n<w> <h>\\n255\\n`` followed by raw row-major bytes.

    Binary images are written with values {0, 255}.
    """
    if isinstance(img, BinaryImage):
        img = img.to_gray()
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.data.tobytes())


def load_binary_pgm(path: PathLike) -> BinaryImage:
    """Read a PGM holding only the values 0 and 255 as a binary image."""
    gray = load_pgm(path)
    values = np.unique(gray.data)
    if not set(values.tolist()) <= {0, 255}:
        raise FormatError(f"{path}: binary PGM must contain only 0 and 255")
    return BinaryImage(gray.data == 255)


# ---------------------------------------------------------------------------
# preprocessing


def crop(img, rect: CropRect):
    """Extract ``rect``; output pixel (i, j) is input pixel (x0 + i, y0 + j)."""
    if (rect.w < 1 or rect.h < 1 or rect.x0 < 0 or rect.y0 < 0
            or rect.x0 + rect.w > img.width or rect.y0 + rect.h > img.height):
        raise BoundsError(f"crop {rect} outside {img.width}x{img.height} image")
    return type(img)(img.data[rect.y0:rect.y0 + rect.h, rect.x0:rect.x0 + rect.w].copy())


def normalize(img: GrayImage) -> FloatImage:
    return FloatImage(img.data.astype(np.float64) / 255.0)


def denormalize(img: FloatImage) -> GrayImage:
    """Clamp to [0, 1], scale by 255 and round half away from zero."""
    scaled = np.clip(img.data, 0.0, 1.0) * 255.0
    return GrayImage(round_half_away(scaled).astype(np.uint8))


# ---------------------------------------------------------------------------
# thresholding


def histogram(img: GrayImage) -> np.ndarray:
    return np.bincount(img.data.ravel(), minlength=256).astype(np.int64)


def otsu_threshold(img: GrayImage) -> int:
    """Otsu threshold over the 256-bin histogram.

    Class 0 holds intensities ``<= t``. The between-class variance is
    compared in exact rational arithmetic, so plateaus resolve to the
    smallest maximizing ``t``.
    """
    hist = histogram(img)
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogramError("Otsu threshold needs at least two distinct intensities")
    counts = [int(c) for c in np.cumsum(hist)]
    sums = [int(s) for s in np.cumsum(hist * np.arange(256, dtype=np.int64))]
    total_n, total_s = counts[-1], sums[-1]

    # w0*w1*(mu0-mu1)^2 = (s0*n1 - s1*n0)^2 / (N^2 * n0 * n1); N^2 is common
    best_t, best = 0, Fraction(-1)
    for t in range(256):
        n0 = counts[t]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            score = Fraction(0)
        else:
            s0 = sums[t]
            s1 = total_s - s0
            score = Fraction((s0 * n1 - s1 * n0) ** 2, n0 * n1)
        if score > best:
            best_t, best = t, score
    return best_t


def binarize(img: GrayImage, threshold: int, invert: bool = False) -> BinaryImage:
    """Pore bit set where intensity <= threshold (dark pores).

    ``invert=True`` flips the polarity for data with bright pores.
    """
    pore = img.data <= threshold
    return BinaryImage(~pore if invert else pore)


def porosity(img: BinaryImage) -> float:
    """Pore pixel percentage."""
    return 100.0 * int(np.count_nonzero(img.data)) / img.data.size


# ---------------------------------------------------------------------------
# mean shift


def mean_shift_filter(img: GrayImage, spatial_radius: int = 2, range_radius: float = 20,
                      max_iter: int = 10) -> GrayImage:
    """Flat-kernel mean shift in joint (x, y, intensity) space.

    Every pixel starts at its own position and intensity. Each iteration
    replaces the estimate by the mean position and intensity of all pixels
    inside the Chebyshev window of ``spatial_radius`` around the rounded
    current position whose intensity lies within ``range_radius`` of the
    current estimate. A pixel stops once both the spatial and intensity
    shift fall below 0.5, or after ``max_iter`` iterations. The output
    intensity is the converged mean, rounded.
    """
    if spatial_radius < 1 or range_radius < 1 or max_iter < 1:
        raise ValueError("spatial_radius, range_radius and max_iter must be >= 1")
    src = img.data.astype(np.float64)
    h, w = src.shape
    rows, cols = np.indices((h, w))
    py = rows.ravel().astype(np.float64)
    px = cols.ravel().astype(np.float64)
    pv = src.ravel().copy()
    active = np.ones(py.size, dtype=bool)
    offsets = range(-spatial_radius, spatial_radius + 1)

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        cy = round_half_away(py[idx]).astype(np.int64)
        cx = round_half_away(px[idx]).astype(np.int64)
        v = pv[idx]
        n = np.zeros(idx.size)
        sy = np.zeros(idx.size)
        sx = np.zeros(idx.size)
        sv = np.zeros(idx.size)
        for dy in offsets:
            ny = cy + dy
            oky = (ny >= 0) & (ny < h)
            nyc = np.clip(ny, 0, h - 1)
            for dx in offsets:
                nx = cx + dx
                ok = oky & (nx >= 0) & (nx < w)
                nv = src[nyc, np.clip(nx, 0, w - 1)]
                ok &= np.abs(nv - v) <= range_radius
                n += ok
                sy += np.where(ok, ny, 0)
                sx += np.where(ok, nx, 0)
                sv += np.where(ok, nv, 0.0)
        has = n > 0
        safe = np.where(has, n, 1)
        ny_ = np.where(has, sy / safe, py[idx])
        nx_ = np.where(has, sx / safe, px[idx])
        nv_ = np.where(has, sv / safe, v)
        shift = np.maximum(np.maximum(np.abs(ny_ - py[idx]), np.abs(nx_ - px[idx])), np.abs(nv_ - v))
        py[idx], px[idx], pv[idx] = ny_, nx_, nv_
        active[idx] = has & (shift >= 0.5)

    out = np.clip(round_half_away(pv), 0, 255).astype(np.uint8)
    return GrayImage(out.reshape(h, w))
