"""Dataset splitting and the mini-batch training loop."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigError, FormatError
from .models import DCNN, AutoencoderModel

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (Steele, Lea and Flood); reference constants."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection."""
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n


def permutation(n: int, seed: int) -> list[int]:
    """Fisher-Yates shuffle of range(n) driven by SplitMix64."""
    rng = SplitMix64(seed)
    out = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def split_dataset(images: Sequence, fraction: float = 0.8, seed: int = 0):
    """Seeded shuffle then prefix split; train count is floor(fraction * n)."""
    n = len(images)
    if n < 2:
        raise ConfigError("need at least 2 images to split")
    if not 0 < fraction < 1:
        raise ConfigError("split fraction must lie strictly between 0 and 1")
    n_train = min(max(math.floor(fraction * n + 1e-9), 1), n - 1)
    order = permutation(n, seed)
    return [images[i] for i in order[:n_train]], [images[i] for i in order[n_train:]]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    split_fraction: float = 0.8
    kind: str = DCNN
    level: str = "l1"
    codebook_size: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    record_time: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.split_fraction < 1:
            raise ConfigError("split_fraction must lie strictly between 0 and 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss: float
    reconstruction: float
    codebook: float = 0.0
    commitment: float = 0.0


@dataclass
class TrainLog:
    config: dict
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)

    def losses(self):
        """Everything except wall time, for reproducibility comparisons."""
        return ([(e.epoch, e.train_loss, e.val_loss) for e in self.epochs],
                [tuple(asdict(s).values()) for s in self.steps])


def as_batch(images) -> np.ndarray:
    """Stack FloatImages, BinaryImages or 2D arrays into an N x H x W x 1 float tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 4:
        return images
    arrs = [np.asarray(im if isinstance(im, np.ndarray) else getattr(im, "data", im), dtype=np.float64)
            for im in images]
    return np.stack(arrs)[..., None]


def _step_losses(model: AutoencoderModel, x: np.ndarray, backward: bool) -> StepRecord:
    z = nn.forward_all(model.encoder, x)
    if model.kind == DCNN:
        y = nn.forward_all(model.decoder, z)
        loss, g = nn.bce_loss(y, x)
        if backward:
            nn.backward_all(model.encoder, nn.backward_all(model.decoder, g))
        return StepRecord(0, 0, loss, loss)
    q = model.quantizer.forward(z)
    y = nn.forward_all(model.decoder, q)
    recon, g = nn.mse_loss(y, x)
    res = model.quantizer.last
    if backward:
        gq = nn.backward_all(model.decoder, g)
        nn.backward_all(model.encoder, model.quantizer.backward(gq))
    total = recon + res.codebook_loss + res.commitment_loss
    return StepRecord(0, 0, total, recon, res.codebook_loss, res.commitment_loss)


def evaluate_loss(model: AutoencoderModel, images, batch_size: int = 128) -> float:
    """Sample-weighted mean training objective; parameters untouched."""
    x = as_batch(images)
    total = 0.0
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        total += _step_losses(model, xb, backward=False).loss * len(xb)
    return total / len(x)


def train(model: AutoencoderModel, train_images, config: TrainConfig, val_images=None,
          progress=None) -> TrainLog:
    """Mini-batch Adam training.

    Batch order in epoch ``e`` is a SplitMix64 permutation seeded with
    ``config.seed + e``; the last partial batch is kept. The per-step loss
    is the batch mean: BCE for the D-CNN, reconstruction MSE plus codebook
    and commitment terms for the VQ-VAE.
    """
    x = as_batch(train_images)
    model.check_input(x)
    xv = as_batch(val_images) if val_images is not None and len(val_images) else None
    if xv is not None:
        model.check_input(xv)
    params = model.params()
    model.zero_grad()
    log = TrainLog(config=asdict(config), seed=config.seed)
    n = len(x)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = permutation(n, config.seed + epoch)
        weighted = 0.0
        for step, start in enumerate(range(0, n, config.batch_size)):
            xb = x[order[start:start + config.batch_size]]
            rec = _step_losses(model, xb, backward=True)
            nn.adam_step(params, config.lr, config.beta1, config.beta2, config.adam_eps)
            rec.epoch, rec.step = epoch, step
            log.steps.append(rec)
            weighted += rec.loss * len(xb)
        val = evaluate_loss(model, xv, config.batch_size) if xv is not None else float("nan")
        seconds = time.perf_counter() - t0 if config.record_time else 0.0
        log.epochs.append(EpochRecord(epoch, weighted / n, val, seconds))
        if progress:
            progress(log.epochs[-1])
    return log


LOSS_CSV_HEADER = ["epoch", "train_loss", "val_loss", "seconds"]


def export_loss_csv(log: TrainLog, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_CSV_HEADER)
        for e in log.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.seconds)])


def read_loss_csv(path: str | os.PathLike) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != LOSS_CSV_HEADER:
        raise FormatError(f"{path}: not a loss CSV")
    return [EpochRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]
