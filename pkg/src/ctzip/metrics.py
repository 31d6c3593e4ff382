"""Image-pair quality metrics: MSE, PSNR, Laplacian and MSLE.

MSE is computed on whatever scale the images carry. For normalized [0, 1]
images use ``max_intensity=1``; the 8-bit convention is
``mse_255 = 255**2 * mse_norm`` with ``max_intensity=255``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np

from .errors import FormatError, ShapeError
from .imaging import FloatImage, GrayImage, round_half_away

INF_PSNR = "inf"


@dataclass(frozen=True, eq=False)
class LaplacianImage(FloatImage):
    """Real-valued Laplacian response, unbounded sign."""


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    psnr_db: float | str
    msle: float
    max_intensity: float
    image_ids: tuple[str, str] = ("a", "b")

    def csv_row(self) -> list[str]:
        return [self.image_ids[0], self.image_ids[1], _fmt_max(self.max_intensity),
                repr(self.mse), _fmt_psnr(self.psnr_db), repr(self.msle)]


CSV_HEADER = ["image_id_a", "image_id_b", "max", "mse", "psnr_db", "msle"]


def _fmt_max(m: float) -> str:
    return str(int(m)) if float(m).is_integer() else repr(m)


def _fmt_psnr(p) -> str:
    return p if p == INF_PSNR else repr(float(p))


def _as_array(img) -> np.ndarray:
    if isinstance(img, np.ndarray):
        return img.astype(np.float64, copy=False)
    return img.data.astype(np.float64) if hasattr(img, "data") else np.asarray(img, dtype=np.float64)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image dimensions differ: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    """Mean of squared pixel differences."""
    x, y = _as_array(a), _as_array(b)
    _check_same(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(mse_value: float, max_intensity: float = 1.0):
    """``20 log10(MAX) - 10 log10(MSE)``; returns ``INF_PSNR`` when mse is 0."""
    if max_intensity <= 0:
        raise ValueError("max_intensity must be positive")
    if mse_value < 0:
        raise ValueError("mse must be non-negative")
    if mse_value == 0:
        return INF_PSNR
    return 20.0 * math.log10(max_intensity) - 10.0 * math.log10(mse_value)


def laplacian(img) -> LaplacianImage:
    """5-point discrete Laplacian with replicate boundary padding."""
    a = _as_array(img)
    if a.ndim != 2 or a.shape[0] < 3 or a.shape[1] < 3:
        raise ShapeError(f"laplacian needs an image of at least 3x3, got {a.shape}")
    p = np.pad(a, 1, mode="edge")
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * a
    return LaplacianImage(lap)


def msle(a, b) -> float:
    """Mean square Laplacian error: mean of the squared Laplacian of a - b."""
    x, y = _as_array(a), _as_array(b)
    _check_same(x, y)
    return float(np.mean(laplacian(x - y).data ** 2))


def laplacian_diff_map(a, b) -> LaplacianImage:
    x, y = _as_array(a), _as_array(b)
    _check_same(x, y)
    return LaplacianImage(laplacian(x).data - laplacian(y).data)


def evaluate_pair(a, b, max_intensity: float = 1.0, ids: tuple[str, str] = ("a", "b")) -> MetricsReport:
    m = mse(a, b)
    return MetricsReport(mse=m, psnr_db=psnr(m, max_intensity), msle=msle(a, b),
                         max_intensity=max_intensity, image_ids=tuple(ids))


def evaluate_gray_pair(a: GrayImage, b: GrayImage, max_intensity: int = 255,
                       ids: tuple[str, str] = ("a", "b")) -> MetricsReport:
    """Metrics for 8-bit images on either the 255 or the normalized scale."""
    if max_intensity == 255:
        return evaluate_pair(a.data.astype(np.float64), b.data.astype(np.float64), 255, ids)
    if max_intensity == 1:
        return evaluate_pair(a.data / 255.0, b.data / 255.0, 1, ids)
    raise ValueError("max_intensity must be 1 or 255")


def write_reports_csv(reports: Iterable[MetricsReport], out: TextIO, header: bool = True) -> None:
    writer = csv.writer(out, lineterminator="\n")
    if header:
        writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow(r.csv_row())


def read_reports_csv(path: str | os.PathLike) -> list[MetricsReport]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise FormatError(f"{path}: not a metrics CSV")
    out = []
    for row in rows[1:]:
        a, b, mx, m, p, l = row
        out.append(MetricsReport(mse=float(m), psnr_db=p if p == INF_PSNR else float(p),
                                 msle=float(l), max_intensity=float(mx), image_ids=(a, b)))
    return out


def rescale_to_gray(lap: FloatImage) -> tuple[GrayImage, float, float]:
    """Affine map of [min, max] onto [0, 255]; returns (image, lo, hi).

    A constant map renders as all zeros.
    """
    d = lap.data
    lo, hi = float(d.min()), float(d.max())
    if hi == lo:
        return GrayImage(np.zeros(d.shape, dtype=np.uint8)), lo, hi
    scaled = round_half_away((d - lo) / (hi - lo) * 255.0)
    return GrayImage(scaled.astype(np.uint8)), lo, hi
