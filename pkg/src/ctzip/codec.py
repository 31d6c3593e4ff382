"""Serialized latents ("CTL1" artifacts) and compression-ratio accounting.

Header, 36 bytes, little-endian::

    magic "CTL1" | version u8 | kind u8 | level u8 | encoding u8 |
    input_h u32 | input_w u32 | latent_h u32 | latent_w u32 | latent_c u32 |
    codebook K u32 | payload length u32

Encodings:

* ``AFFINE8`` (D-CNN): per channel ``min, max`` as float64 pairs, then one
  code byte per latent value in H, W, C order.
* ``BITPACK`` (VQ-VAE): code indices at ``ceil(log2 K)`` bits each,
  row-major, MSB first, last byte zero-padded.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ShapeError, TruncatedError
from .imaging import FloatImage, GrayImage, normalize, round_half_away
from .models import DCNN, LEVELS, VQVAE, AutoencoderModel, Latent, decode, encode

MAGIC = b"CTL1"
VERSION = 1
AFFINE8, BITPACK = 1, 2
_HEADER = struct.Struct("<4sBBBBIIIIIII")
HEADER_SIZE = _HEADER.size
_KINDS = {DCNN: 0, VQVAE: 1}
_CHANNEL_LEVEL = {lv.channels: lv for lv in LEVELS.values()}


@dataclass(frozen=True)
class LatentArtifact:
    kind: str
    level: str
    input_shape: tuple[int, int]
    latent_shape: tuple[int, int, int]
    encoding: int
    codebook_size: int
    payload: bytes

    def __post_init__(self):
        expected = payload_size(self.encoding, self.latent_shape, self.codebook_size)
        if len(self.payload) != expected:
            raise FormatError(f"payload is {len(self.payload)} bytes, encoding requires {expected}")

    @property
    def nbytes(self) -> int:
        return HEADER_SIZE + len(self.payload)

    def to_bytes(self) -> bytes:
        level_no = int(self.level[1]) if self.level in LEVELS else 0
        h, w, c = self.latent_shape
        head = _HEADER.pack(MAGIC, VERSION, _KINDS[self.kind], level_no, self.encoding,
                            self.input_shape[0], self.input_shape[1], h, w, c,
                            self.codebook_size, len(self.payload))
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "LatentArtifact":
        if len(data) < HEADER_SIZE:
            raise TruncatedError("artifact shorter than its header")
        magic, version, kind, level_no, enc, ih, iw, h, w, c, k, n = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError("not a CTL1 artifact")
        if version != VERSION:
            raise FormatError(f"unsupported artifact version {version}")
        kinds = {v: key for key, v in _KINDS.items()}
        if kind not in kinds or enc not in (AFFINE8, BITPACK):
            raise FormatError("artifact has an invalid kind or encoding")
        payload = data[HEADER_SIZE:]
        if len(payload) < n:
            raise TruncatedError(f"artifact payload truncated: {len(payload)} of {n} bytes")
        if len(payload) > n:
            raise FormatError("trailing bytes after artifact payload")
        level = f"l{level_no}" if level_no else ""
        return cls(kinds[kind], level, (ih, iw), (h, w, c), enc, k, payload)


def bits_per_index(k: int) -> int:
    if k < 2:
        raise DataError("codebook size must be >= 2")
    return (k - 1).bit_length()


def payload_size(encoding: int, latent_shape, k: int = 0) -> int:
    h, w, c = latent_shape
    if encoding == AFFINE8:
        return 16 * c + h * w * c
    if encoding == BITPACK:
        return -(-h * w * bits_per_index(k) // 8)
    raise FormatError(f"unknown encoding {encoding}")


def _infer_level(channels: int, spatial: int, level, input_shape):
    lv = LEVELS.get(level) if level else _CHANNEL_LEVEL.get(channels)
    if input_shape is None:
        input_shape = (spatial[0] * lv.factor, spatial[1] * lv.factor) if lv else (0, 0)
    return (lv.name if lv else ""), tuple(input_shape)


def pack_cnn_latent(latent, level: str | None = None, input_shape=None) -> LatentArtifact:
    """Per-channel affine quantization of a D-CNN latent to 8-bit codes.

    ``code = round((v - min) / (max - min) * 255)``; a constant channel
    stores code 0 everywhere.
    """
    z = np.asarray(getattr(latent, "tensor", latent), dtype=np.float64)
    if z.ndim == 4 and z.shape[0] == 1:
        z = z[0]
    if z.ndim != 3:
        raise ShapeError(f"expected an H x W x C latent, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DataError("latent contains non-finite values")
    lo = z.min(axis=(0, 1))
    hi = z.max(axis=(0, 1))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    codes = np.where(span > 0, round_half_away((z - lo) / safe * 255.0), 0.0)
    codes = np.clip(codes, 0, 255).astype(np.uint8)
    ranges = np.stack([lo, hi], axis=1).astype("<f8")
    level, input_shape = _infer_level(z.shape[2], z.shape[:2], level, input_shape)
    return LatentArtifact(DCNN, level, input_shape, z.shape, AFFINE8, 0,
                          ranges.tobytes() + codes.tobytes())


def unpack_cnn_latent(artifact: LatentArtifact) -> np.ndarray:
    """H x W x C latent; ``min*(1-t) + max*t`` with ``t = code/255`` so both range ends are exact."""
    if artifact.kind != DCNN or artifact.encoding != AFFINE8:
        raise FormatError("artifact does not hold an affine-quantized D-CNN latent")
    h, w, c = artifact.latent_shape
    ranges = np.frombuffer(artifact.payload[:16 * c], dtype="<f8").reshape(c, 2)
    codes = np.frombuffer(artifact.payload[16 * c:], dtype=np.uint8).reshape(h, w, c)
    t = codes / 255.0
    return ranges[:, 0] * (1.0 - t) + ranges[:, 1] * t


def pack_vq_indices(indices, k: int, level: str = "", input_shape=(0, 0),
                    embedding_dim: int = 0) -> LatentArtifact:
    idx = np.asarray(indices)
    if idx.ndim != 2:
        raise ShapeError(f"expected an H x W index grid, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise DataError(f"code index outside [0, {k})")
    b = bits_per_index(k)
    shifts = np.arange(b - 1, -1, -1, dtype=np.int64)
    bits = ((idx.astype(np.int64).reshape(-1, 1) >> shifts) & 1).astype(np.uint8)
    payload = np.packbits(bits.reshape(-1)).tobytes()
    return LatentArtifact(VQVAE, level, tuple(input_shape), (idx.shape[0], idx.shape[1], embedding_dim),
                          BITPACK, k, payload)


def unpack_vq_indices(artifact: LatentArtifact, k: int | None = None) -> np.ndarray:
    if artifact.kind != VQVAE or artifact.encoding != BITPACK:
        raise FormatError("artifact does not hold bit-packed VQ indices")
    if k is not None and k != artifact.codebook_size:
        raise FormatError(f"artifact was packed for K={artifact.codebook_size}, not {k}")
    k = artifact.codebook_size
    h, w, _ = artifact.latent_shape
    b = bits_per_index(k)
    if len(artifact.payload) != payload_size(BITPACK, artifact.latent_shape, k):
        raise FormatError("payload length does not match the index grid")
    bits = np.unpackbits(np.frombuffer(artifact.payload, dtype=np.uint8))[:h * w * b]
    weights = 1 << np.arange(b - 1, -1, -1, dtype=np.int64)
    idx = (bits.reshape(-1, b).astype(np.int64) * weights).sum(axis=1)
    if idx.size and idx.max() >= k:
        raise FormatError("decoded index outside the codebook")
    return idx.reshape(h, w)


def compression_ratio(original: GrayImage, artifact: LatentArtifact) -> float:
    """Original bytes (one per pixel) over artifact bytes including the header."""
    return original.width * original.height / artifact.nbytes


def save_artifact(artifact: LatentArtifact, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(artifact.to_bytes())


def load_artifact(path: str | os.PathLike) -> LatentArtifact:
    with open(path, "rb") as fh:
        return LatentArtifact.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# model-level helpers


def compress(model: AutoencoderModel, image) -> LatentArtifact:
    """Encode an 8-bit or normalized image and serialize its latent."""
    img = normalize(image) if isinstance(image, GrayImage) else image
    lat = encode(model, img)
    shape = (model.input_size, model.input_size)
    if model.kind == DCNN:
        return pack_cnn_latent(lat.tensor, model.level.name, shape)
    return pack_vq_indices(lat.indices, model.codebook.K, model.level.name, shape, model.codebook.D)


def decompress(model: AutoencoderModel, artifact: LatentArtifact) -> FloatImage:
    if artifact.kind != model.kind:
        raise FormatError(f"{artifact.kind} artifact cannot be decoded by a {model.kind} model")
    if artifact.level and artifact.level != model.level.name:
        raise FormatError(f"artifact level {artifact.level} != model level {model.level.name}")
    if model.kind == DCNN:
        return decode(model, Latent(DCNN, unpack_cnn_latent(artifact)))
    if artifact.codebook_size != model.codebook.K:
        raise FormatError(f"artifact K={artifact.codebook_size} != model K={model.codebook.K}")
    idx = unpack_vq_indices(artifact)
    return decode(model, Latent(VQVAE, model.codebook.lookup(idx), idx))


def roundtrip(model: AutoencoderModel, image) -> FloatImage:
    """encode, pack to bytes, parse, unpack, decode."""
    data = compress(model, image).to_bytes()
    return decompress(model, LatentArtifact.from_bytes(data))
