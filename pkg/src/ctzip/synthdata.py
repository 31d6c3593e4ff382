"""Synthetic porous-media slices and metric fixtures.

Porous slices come from a seeded Gaussian white-noise field smoothed by a
box filter; the lowest ``target_porosity`` percent of the field becomes
pore. Ranking by value (stable argsort) hits the requested pore count
exactly up to one pixel.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import BoundsError, ConfigError
from .imaging import BinaryImage, FloatImage, GrayImage, round_half_away, save_pgm

PAPER_POROSITY = 19.16


@dataclass(frozen=True)
class PorousSpec:
    width: int = 64
    height: int = 64
    target_porosity: float = PAPER_POROSITY
    correlation_length: int = 16
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.target_porosity < 100:
            raise ConfigError("target_porosity must lie strictly between 0 and 100")
        if self.correlation_length < 1:
            raise ConfigError("correlation_length must be >= 1")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image dimensions must be positive")


def gen_porous_binary(spec: PorousSpec) -> BinaryImage:
    rng = np.random.default_rng(spec.seed)
    field = rng.standard_normal((spec.height, spec.width))
    field = uniform_filter(field, size=spec.correlation_length, mode="wrap")
    n_pore = int(round_half_away(spec.target_porosity / 100.0 * field.size))
    order = np.argsort(field, axis=None, kind="stable")
    pore = np.zeros(field.size, dtype=bool)
    pore[order[:n_pore]] = True
    return BinaryImage(pore.reshape(field.shape))


def gen_noisy_gray(binary: BinaryImage, solid_level: float = 180, pore_level: float = 60,
                   noise_sigma: float = 20.0, seed: int = 0) -> GrayImage:
    """Two-level rendering of ``binary`` plus seeded Gaussian noise."""
    if solid_level == pore_level:
        raise ConfigError("solid_level and pore_level must differ")
    rng = np.random.default_rng(seed)
    base = np.where(binary.data, float(pore_level), float(solid_level))
    if noise_sigma > 0:
        base = base + rng.normal(0.0, noise_sigma, size=base.shape)
    return GrayImage(round_half_away(np.clip(base, 0.0, 255.0)).astype(np.uint8))


def gen_shifted_square(field_size: int = 32, square_side: int = 8, shift: int = 1) -> tuple[FloatImage, FloatImage]:
    """Centered solid square (A) and the same square moved ``shift`` pixels right (B)."""
    x0 = (field_size - square_side) // 2
    if square_side < 1 or x0 < 0 or x0 + shift < 0 or x0 + shift + square_side > field_size:
        raise BoundsError(f"square of side {square_side} shifted by {shift} does not fit in {field_size}")
    a = np.zeros((field_size, field_size))
    b = np.zeros((field_size, field_size))
    a[x0:x0 + square_side, x0:x0 + square_side] = 1.0
    b[x0:x0 + square_side, x0 + shift:x0 + shift + square_side] = 1.0
    return FloatImage(a), FloatImage(b)


def flip_interior_pixels(a: FloatImage, target_mse: float, rng: np.random.Generator,
                         tolerance: float = 0.05) -> FloatImage:
    """Flip random pixels strictly inside the foreground square until the MSE
    against ``a`` is within ``tolerance`` (relative) of ``target_mse``.
    """
    fg = a.data > 0.5
    rows, cols = np.nonzero(fg)
    r0, r1, c0, c1 = rows.min() + 1, rows.max() - 1, cols.min() + 1, cols.max() - 1
    if r1 < r0 or c1 < c0:
        raise ConfigError("square has no interior pixels")
    cand = np.array([(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)])
    order = rng.permutation(len(cand))
    b = a.data.copy()
    n = a.data.size
    for k in order:
        if abs(np.mean((b - a.data) ** 2) - target_mse) < tolerance * target_mse:
            break
        r, c = cand[k]
        b[r, c] = 1.0 - b[r, c]
    if abs(np.mean((b - a.data) ** 2) - target_mse) >= tolerance * target_mse:
        raise ConfigError(f"cannot reach mse {target_mse} with {len(cand)} interior pixels of {n}")
    return FloatImage(b)


def porous_dataset(count: int = 256, spec: PorousSpec | None = None) -> list[BinaryImage]:
    """``count`` binary slices with seeds ``spec.seed + i``."""
    spec = spec or PorousSpec()
    out = []
    for i in range(count):
        s = PorousSpec(**{**asdict(spec), "seed": spec.seed + i})
        out.append(gen_porous_binary(s))
    return out


def write_dataset(images, directory: str | os.PathLike, spec: PorousSpec, extra: dict | None = None) -> list[str]:
    """Write ``slice_0000.pgm``... plus ``manifest.txt`` with the generator settings."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = os.path.join(directory, f"slice_{i:04d}.pgm")
        save_pgm(img, p)
        paths.append(p)
    lines = [f"{k}={v}" for k, v in asdict(spec).items()]
    lines.append(f"count={len(images)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return paths
