"""D-CNN and VQ-VAE autoencoder builders, encode/decode, checkpoints.

Both models are described by a flat table of :class:`LayerSpec` entries,
which is also what checkpoints store, so a reloaded model is rebuilt from
exactly the layers it was saved with.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, ShapeError, TruncatedError
from .imaging import FloatImage


@dataclass(frozen=True)
class CompressionLevel:
    name: str
    factor: int
    channels: int

    @property
    def stages(self) -> int:
        return self.factor.bit_length() - 1

    def latent_shape(self, input_size: int) -> tuple[int, int, int]:
        if input_size % self.factor:
            raise ConfigError(f"input size {input_size} not divisible by {self.factor} for level {self.name}")
        s = input_size // self.factor
        return s, s, self.channels


L1 = CompressionLevel("l1", 4, 8)
L2 = CompressionLevel("l2", 8, 4)
L3 = CompressionLevel("l3", 16, 2)
LEVELS = {lv.name: lv for lv in (L1, L2, L3)}

DEFAULT_CODEBOOK = {"l1": 128, "l2": 256, "l3": 512}
DCNN_HIDDEN = 16
VQ_HIDDEN = (16, 32, 64, 128)
COMMITMENT_BETA = 0.25

DCNN, VQVAE = "dcnn", "vqvae"


def get_level(level) -> CompressionLevel:
    if isinstance(level, CompressionLevel):
        return level
    try:
        return LEVELS[str(level).lower()]
    except KeyError:
        raise ConfigError(f"unknown compression level {level!r}; expected one of {sorted(LEVELS)}") from None


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    cin: int = 0
    cout: int = 0
    stride: int = 1


_LAYER_CODES = {"conv": 1, "tconv": 2, "relu": 3, "sigmoid": 4, "maxpool": 5, "upsample": 6}
_CODE_LAYERS = {v: k for k, v in _LAYER_CODES.items()}


def _make_layer(spec: LayerSpec, rng, name: str) -> nn.Layer:
    if spec.kind == "conv":
        return nn.Conv2D(spec.cin, spec.cout, spec.stride, rng, name)
    if spec.kind == "tconv":
        return nn.ConvTranspose2D(spec.cin, spec.cout, spec.stride, rng, name)
    return {"relu": nn.ReLU, "sigmoid": nn.Sigmoid, "maxpool": nn.MaxPool2x2,
            "upsample": nn.Upsample2x}[spec.kind]()


@dataclass
class Latent:
    """Encoder output for one image.

    ``tensor`` is H' x W' x C. For the VQ-VAE it holds the selected codebook
    rows and ``indices`` the H' x W' code grid, which is the compressed form.
    """

    kind: str
    tensor: np.ndarray
    indices: np.ndarray | None = None


class AutoencoderModel:
    def __init__(self, kind: str, level: CompressionLevel, input_size: int,
                 encoder_specs: Sequence[LayerSpec], decoder_specs: Sequence[LayerSpec],
                 codebook_size: int = 0, seed: int = 0, beta: float = COMMITMENT_BETA):
        if kind not in (DCNN, VQVAE):
            raise ConfigError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.level = level
        self.input_size = input_size
        self.latent_shape = level.latent_shape(input_size)
        self.encoder_specs = list(encoder_specs)
        self.decoder_specs = list(decoder_specs)
        self.seed = seed
        self.beta = beta
        rng = np.random.default_rng(seed)
        self.encoder = [_make_layer(s, rng, f"enc{i}") for i, s in enumerate(self.encoder_specs)]
        self.decoder = [_make_layer(s, rng, f"dec{i}") for i, s in enumerate(self.decoder_specs)]
        if self.encoder and isinstance(self.encoder[0], nn.Conv2D):
            self.encoder[0].need_input_grad = False
        self.quantizer = None
        if kind == VQVAE:
            if codebook_size < 2:
                raise ConfigError("VQ-VAE codebook size must be >= 2")
            cb = nn.Codebook.init(codebook_size, self.latent_shape[2], rng)
            self.quantizer = nn.VectorQuantizer(cb, beta)

    @property
    def codebook(self) -> nn.Codebook | None:
        return self.quantizer.codebook if self.quantizer else None

    def params(self) -> list[nn.Parameter]:
        out = [p for layer in self.encoder for p in layer.params()]
        if self.quantizer:
            out += self.quantizer.params()
        out += [p for layer in self.decoder for p in layer.params()]
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def __repr__(self):
        return f"AutoencoderModel({self.kind}, {self.level.name}, input={self.input_size}, params={count_params(self)})"

    # batch paths, NHWC
    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1:] != (self.input_size, self.input_size, 1):
            raise ShapeError(f"expected N x {self.input_size} x {self.input_size} x 1 input, got {x.shape}")

    def encode_batch(self, x: np.ndarray) -> np.ndarray:
        """Continuous encoder output z_e."""
        self.check_input(x)
        return nn.forward_all(self.encoder, x)

    def decode_batch(self, z: np.ndarray) -> np.ndarray:
        """Raw decoder output (no clamp)."""
        if z.shape[1:] != self.latent_shape:
            raise ShapeError(f"latent shape {z.shape[1:]} != {self.latent_shape}")
        return nn.forward_all(self.decoder, z)

    def reconstruct_batch(self, x: np.ndarray) -> np.ndarray:
        """Full forward pass, outputs clipped to [0, 1]."""
        z = self.encode_batch(x)
        if self.quantizer:
            z = self.quantizer.forward(z)
        return np.clip(self.decode_batch(z), 0.0, 1.0)


def _dcnn_specs(level: CompressionLevel, hidden: Sequence[int]):
    widths = list(hidden) + [level.channels]
    enc, cin = [], 1
    for w in widths:
        enc += [LayerSpec("conv", cin, w), LayerSpec("relu"), LayerSpec("maxpool")]
        cin = w
    dec = []
    for w in reversed(widths):
        dec += [LayerSpec("conv", cin, w), LayerSpec("relu"), LayerSpec("upsample")]
        cin = w
    dec += [LayerSpec("conv", cin, 1), LayerSpec("sigmoid")]
    return enc, dec


def _vqvae_specs(level: CompressionLevel, hidden: Sequence[int]):
    enc, cin = [], 1
    for w in hidden:
        enc += [LayerSpec("conv", cin, w, 2), LayerSpec("relu")]
        cin = w
    enc.append(LayerSpec("conv", cin, level.channels, 1))
    dec, cin = [], level.channels
    for w in reversed(hidden):
        dec += [LayerSpec("tconv", cin, w, 2), LayerSpec("relu")]
        cin = w
    dec.append(LayerSpec("conv", cin, 1, 1))
    return enc, dec


def build_dcnn(level="l1", input_size: int = 512, hidden: Sequence[int] | None = None,
               seed: int = 0) -> AutoencoderModel:
    """Conv3x3-ReLU/maxpool encoder, conv3x3-ReLU/upsample decoder, sigmoid head.

    ``hidden`` lists the encoder widths before the latent conv; its length
    must be ``level.stages - 1`` (16 channels each by default).
    """
    level = get_level(level)
    level.latent_shape(input_size)
    if hidden is None:
        hidden = [DCNN_HIDDEN] * (level.stages - 1)
    if len(hidden) != level.stages - 1:
        raise ConfigError(f"D-CNN at {level.name} needs {level.stages - 1} hidden widths, got {len(hidden)}")
    enc, dec = _dcnn_specs(level, hidden)
    return AutoencoderModel(DCNN, level, input_size, enc, dec, seed=seed)


def build_vqvae(level="l1", input_size: int = 512, codebook_size: int | None = None,
                hidden: Sequence[int] | None = None, seed: int = 0,
                beta: float = COMMITMENT_BETA) -> AutoencoderModel:
    """Stride-2 conv encoder, K x D codebook, stride-2 transposed-conv decoder.

    One stride-2 stage per halving (2, 3 or 4). Widths default to
    16, 32, 64, 128 for as many stages as the level needs.
    """
    level = get_level(level)
    level.latent_shape(input_size)
    if codebook_size is None:
        codebook_size = DEFAULT_CODEBOOK[level.name]
    if hidden is None:
        hidden = VQ_HIDDEN[:level.stages]
    if len(hidden) != level.stages:
        raise ConfigError(f"VQ-VAE at {level.name} needs {level.stages} hidden widths, got {len(hidden)}")
    enc, dec = _vqvae_specs(level, hidden)
    return AutoencoderModel(VQVAE, level, input_size, enc, dec, codebook_size, seed, beta)


def build_model(kind: str, level="l1", input_size: int = 512, codebook_size: int | None = None,
                seed: int = 0) -> AutoencoderModel:
    if kind == DCNN:
        return build_dcnn(level, input_size, seed=seed)
    if kind == VQVAE:
        return build_vqvae(level, input_size, codebook_size, seed=seed)
    raise ConfigError(f"unknown model kind {kind!r}")


def _image_batch(model: AutoencoderModel, image: FloatImage) -> np.ndarray:
    if image.shape != (model.input_size, model.input_size):
        raise ShapeError(f"image {image.shape} does not match model input {model.input_size}")
    return image.data[None, :, :, None]


def encode(model: AutoencoderModel, image: FloatImage) -> Latent:
    z = model.encode_batch(_image_batch(model, image))[0]
    if model.kind == DCNN:
        return Latent(DCNN, z)
    idx = nn.nearest_codes(z, model.codebook.vectors.value)
    return Latent(VQVAE, model.codebook.lookup(idx), idx)


def decode(model: AutoencoderModel, latent: Latent) -> FloatImage:
    """Decode one latent to a [0, 1] image.

    VQ-VAE latents carrying indices are decoded from their codebook rows.
    """
    if latent.kind != model.kind:
        raise ShapeError(f"{latent.kind} latent given to {model.kind} model")
    z = latent.tensor
    if latent.indices is not None:
        if model.kind != VQVAE:
            raise ShapeError("index latents are only valid for a VQ-VAE")
        if latent.indices.min() < 0 or latent.indices.max() >= model.codebook.K:
            raise ShapeError("code index out of codebook range")
        z = model.codebook.lookup(latent.indices)
    out = model.decode_batch(np.asarray(z, dtype=np.float64)[None])[0, :, :, 0]
    return FloatImage(np.clip(out, 0.0, 1.0))


def count_params(model: AutoencoderModel) -> int:
    return int(sum(p.size for p in model.params()))


# ---------------------------------------------------------------------------
# checkpoints: magic "CTZ1", little-endian throughout

CKPT_MAGIC = b"CTZ1"
CKPT_VERSION = 1
_KIND_CODES = {DCNN: 0, VQVAE: 1}


def _write_params(buf: io.BytesIO, params: Sequence[nn.Parameter]) -> None:
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        buf.write(struct.pack("<H", len(name)) + name)
        buf.write(struct.pack("<B", p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(struct.pack("<Q", p.step_count))
        for arr in (p.value, p.m, p.v):
            buf.write(arr.astype("<f8").tobytes())


def checkpoint_bytes(model: AutoencoderModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HBBIQd", CKPT_VERSION, _KIND_CODES[model.kind], int(model.level.name[1]),
                          model.input_size, model.seed % (1 << 64), model.beta))
    k = model.codebook.K if model.codebook else 0
    buf.write(struct.pack("<I", k))
    for specs in (model.encoder_specs, model.decoder_specs):
        buf.write(struct.pack("<I", len(specs)))
        for s in specs:
            buf.write(struct.pack("<BIIB", _LAYER_CODES[s.kind], s.cin, s.cout, s.stride))
    _write_params(buf, model.params())
    return buf.getvalue()


def save_checkpoint(model: AutoencoderModel, path: str | os.PathLike) -> None:
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data: bytes) -> AutoencoderModel:
    r = _Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a CTZ1 checkpoint")
    version, kind_code, level_no, input_size, seed, beta = r.unpack("<HBBIQd")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind_code not in kinds or f"l{level_no}" not in LEVELS:
        raise FormatError("checkpoint has invalid kind or level")
    (k,) = r.unpack("<I")
    tables = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        specs = []
        for _ in range(n):
            code, cin, cout, stride = r.unpack("<BIIB")
            if code not in _CODE_LAYERS:
                raise FormatError(f"unknown layer code {code}")
            specs.append(LayerSpec(_CODE_LAYERS[code], cin, cout, stride))
        tables.append(specs)
    kind = kinds[kind_code]
    try:
        model = AutoencoderModel(kind, LEVELS[f"l{level_no}"], input_size, tables[0], tables[1],
                                 codebook_size=k, seed=seed, beta=beta)
    except (ConfigError, ValueError) as exc:
        raise FormatError(f"checkpoint describes an invalid model: {exc}") from exc
    params = model.params()
    (n,) = r.unpack("<I")
    if n != len(params):
        raise FormatError(f"checkpoint has {n} parameters, model expects {len(params)}")
    for p in params:
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if name != p.name or tuple(shape) != p.shape:
            raise FormatError(f"parameter {name}{shape} does not match {p.name}{p.shape}")
        (p.step_count,) = r.unpack("<Q")
        size = int(np.prod(shape)) * 8
        for attr in ("value", "m", "v"):
            arr = np.frombuffer(r.take(size), dtype="<f8").astype(np.float64).reshape(shape)
            setattr(p, attr, arr)
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint")
    return model


def load_checkpoint(path: str | os.PathLike) -> AutoencoderModel:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
