"""Small reverse-mode engine for the layers both autoencoders need.

Tensors are plain ``float64`` numpy arrays in NHWC layout. Each layer
caches what it needs in ``forward`` and returns the input gradient from
``backward``, accumulating parameter gradients into ``Parameter.grad``.
Backpropagation is the reverse walk over a layer list, so the tape is
the model's layer order itself.

Every contraction is a fixed sequence of GEMMs over the whole batch
(3x3 windows folded into the inner dimension, or one GEMM per kernel tap
in row-major tap order), so training is bit-reproducible for a given BLAS
thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

Tensor = np.ndarray

KERNEL = 3
BCE_EPS = 1e-7


@dataclass(eq=False)
class Parameter:
    """Trainable array with its gradient and Adam moments."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(default=None)
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        for attr in ("grad", "m", "v"):
            arr = getattr(self, attr)
            if arr is None:
                setattr(self, attr, np.zeros_like(self.value))
            else:
                arr = np.ascontiguousarray(arr, dtype=np.float64)
                if arr.shape != self.value.shape:
                    raise ShapeError(f"{self.name}.{attr} shape {arr.shape} != {self.value.shape}")
                setattr(self, attr, arr)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# convolution primitives


def same_padding(n: int, stride: int, k: int = KERNEL) -> tuple[int, int, int]:
    """(output size, pad before, pad after) for same-padding; extra pad goes after."""
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def _tap(xp: np.ndarray, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    return xp[:, kh:kh + s * (oh - 1) + 1:s, kw:kw + s * (ow - 1) + 1:s, :]


def _windows(xp: np.ndarray, s: int, oh: int, ow: int) -> np.ndarray:
    """N x oh x ow x C x 3 x 3 strided view of 3x3 neighbourhoods."""
    v = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    return v[:, :s * (oh - 1) + 1:s, :s * (ow - 1) + 1:s]


def _correlate(xp: np.ndarray, w: np.ndarray, s: int, oh: int, ow: int) -> np.ndarray:
    """Strided 3x3 cross-correlation of a pre-padded input, no bias."""
    return np.tensordot(_windows(xp, s, oh, ow), w, axes=((4, 5, 3), (0, 1, 2)))


def _correlate_adjoint(g: np.ndarray, w: np.ndarray, s: int, padded_shape) -> np.ndarray:
    """Adjoint of ``_correlate`` with respect to its padded input."""
    n, oh, ow, co = g.shape
    if s == 1:
        # full correlation with the flipped, channel-swapped kernel
        gp = np.pad(g, ((0, 0), (2, padded_shape[1] - oh), (2, padded_shape[2] - ow), (0, 0)))
        wf = w[::-1, ::-1].transpose(0, 1, 3, 2)
        return _correlate(gp, wf, 1, padded_shape[1], padded_shape[2])
    gp = np.zeros(padded_shape)
    g2 = g.reshape(-1, co)
    for kh in range(KERNEL):
        for kw in range(KERNEL):
            _tap(gp, kh, kw, s, oh, ow)[...] += (g2 @ w[kh, kw].T).reshape(n, oh, ow, -1)
    return gp


def _correlate_wgrad(xp: np.ndarray, g: np.ndarray, s: int) -> np.ndarray:
    n, oh, ow, co = g.shape
    c = xp.shape[3]
    if c <= 4:
        gw = np.tensordot(_windows(xp, s, oh, ow), g, axes=((0, 1, 2), (0, 1, 2)))
        return np.ascontiguousarray(gw.transpose(1, 2, 0, 3))
    g2 = g.reshape(-1, co)
    gw = np.empty((KERNEL, KERNEL, c, co))
    for kh in range(KERNEL):
        for kw in range(KERNEL):
            gw[kh, kw] = _tap(xp, kh, kw, s, oh, ow).reshape(-1, c).T @ g2
    return gw


def conv2d(x: Tensor, w: np.ndarray, b: np.ndarray, stride: int = 1) -> Tensor:
    """Same-padded 3x3 convolution (cross-correlation), output ceil(H/s) x ceil(W/s)."""
    if x.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weights {w.shape}")
    oh, pt, pb = same_padding(x.shape[1], stride)
    ow, pl, pr = same_padding(x.shape[2], stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return _correlate(xp, w, stride, oh, ow) + b


def transposed_conv2d(x: Tensor, w: np.ndarray, b: np.ndarray, stride: int = 2) -> Tensor:
    """Transposed 3x3 convolution, output stride*H x stride*W.

    ``w`` has shape (3, 3, Cin, Cout). This is exactly the adjoint of
    ``conv2d`` at the same stride with weights ``w.transpose(0, 1, 3, 2)``.
    """
    if x.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"transposed_conv2d: input {x.shape} incompatible with weights {w.shape}")
    n, h, wd, _ = x.shape
    oh, ow = stride * h, stride * wd
    _, pt, pb = same_padding(oh, stride)
    _, pl, pr = same_padding(ow, stride)
    wc = w.transpose(0, 1, 3, 2)
    gp = _correlate_adjoint(x, wc, stride, (n, oh + pt + pb, ow + pl + pr, w.shape[3]))
    return gp[:, pt:pt + oh, pl:pl + ow, :] + b


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base layer: stateless unless it owns parameters."""

    kind = "layer"

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, cin: int, cout: int, stride: int = 1, rng: np.random.Generator | None = None,
                 name: str = "conv"):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.cin, self.cout, self.stride = cin, cout, stride
        shape = (KERNEL, KERNEL, cin, cout)
        w = glorot_uniform(rng, shape, KERNEL * KERNEL * cin, KERNEL * KERNEL * cout) if rng is not None \
            else np.zeros(shape)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")
        # the first layer of a network can skip its (unused) input gradient
        self.need_input_grad = True
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise ShapeError(f"{self.weight.name}: expected {self.cin} input channels, got shape {x.shape}")
        s = self.stride
        oh, pt, pb = same_padding(x.shape[1], s)
        ow, pl, pr = same_padding(x.shape[2], s)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        self._cache = (xp, (pt, pl), x.shape)
        return _correlate(xp, self.weight.value, s, oh, ow) + self.bias.value

    def backward(self, grad):
        xp, (pt, pl), shape = self._cache
        s = self.stride
        self.weight.grad += _correlate_wgrad(xp, grad, s)
        self.bias.grad += grad.reshape(-1, self.cout).sum(axis=0)
        if not self.need_input_grad:
            return None
        gp = _correlate_adjoint(grad, self.weight.value, s, xp.shape)
        return gp[:, pt:pt + shape[1], pl:pl + shape[2], :]

    def __repr__(self):
        return f"Conv2D({self.cin}->{self.cout}, stride={self.stride})"


class ConvTranspose2D(Layer):
    kind = "tconv"

    def __init__(self, cin: int, cout: int, stride: int = 2, rng: np.random.Generator | None = None,
                 name: str = "tconv"):
        self.cin, self.cout, self.stride = cin, cout, stride
        shape = (KERNEL, KERNEL, cin, cout)
        w = glorot_uniform(rng, shape, KERNEL * KERNEL * cin, KERNEL * KERNEL * cout) if rng is not None \
            else np.zeros(shape)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise ShapeError(f"{self.weight.name}: expected {self.cin} input channels, got shape {x.shape}")
        s = self.stride
        n, h, w, _ = x.shape
        oh, ow = s * h, s * w
        _, pt, pb = same_padding(oh, s)
        _, pl, pr = same_padding(ow, s)
        self._cache = (x, (pt, pb, pl, pr))
        wc = self.weight.value.transpose(0, 1, 3, 2)
        gp = _correlate_adjoint(x, wc, s, (n, oh + pt + pb, ow + pl + pr, self.cout))
        return gp[:, pt:pt + oh, pl:pl + ow, :] + self.bias.value

    def backward(self, grad):
        x, (pt, pb, pl, pr) = self._cache
        s = self.stride
        gp = np.pad(grad, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        self.bias.grad += grad.reshape(-1, self.cout).sum(axis=0)
        # weight grad of the tied conv is (3,3,Cout,Cin); swap back
        self.weight.grad += _correlate_wgrad(gp, x, s).transpose(0, 1, 3, 2)
        wc = self.weight.value.transpose(0, 1, 3, 2)
        return _correlate(gp, wc, s, x.shape[1], x.shape[2])

    def __repr__(self):
        return f"ConvTranspose2D({self.cin}->{self.cout}, stride={self.stride})"


def maxpool2x2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling; also returns the flat within-block argmax (first wins)."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def maxpool2x2_backward(grad: Tensor, arg: np.ndarray) -> Tensor:
    n, h2, w2, c = grad.shape
    blocks = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(blocks, arg[..., None], grad[..., None], axis=-1)
    return blocks.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)


def upsample_nearest2x(x: Tensor) -> Tensor:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample_nearest2x_backward(grad: Tensor) -> Tensor:
    n, h, w, c = grad.shape
    return grad.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


class MaxPool2x2(Layer):
    kind = "maxpool"

    def forward(self, x):
        y, self._arg = maxpool2x2(x)
        return y

    def backward(self, grad):
        return maxpool2x2_backward(grad, self._arg)


class Upsample2x(Layer):
    kind = "upsample"

    def forward(self, x):
        return upsample_nearest2x(x)

    def backward(self, grad):
        return upsample_nearest2x_backward(grad)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return grad * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad):
        return grad * self._y * (1.0 - self._y)


def forward_all(layers: Sequence[Layer], x: Tensor) -> Tensor:
    for layer in layers:
        x = layer.forward(x)
    return x


def backward_all(layers: Sequence[Layer], grad: Tensor) -> Tensor:
    for layer in reversed(layers):
        grad = layer.backward(grad)
    return grad


# ---------------------------------------------------------------------------
# losses: each returns (value, d value / d pred)


def _check_pair(p: Tensor, t: Tensor) -> None:
    if p.shape != t.shape:
        raise ShapeError(f"loss operands differ in shape: {p.shape} vs {t.shape}")


def bce_loss(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    _check_pair(pred, target)
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    inside = (pred > BCE_EPS) & (pred < 1.0 - BCE_EPS)
    grad = np.where(inside, (p - target) / (p * (1.0 - p)), 0.0) / pred.size
    return float(loss), grad


def mse_loss(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    _check_pair(pred, target)
    d = pred - target
    return float(np.mean(d * d)), 2.0 * d / d.size


# ---------------------------------------------------------------------------
# vector quantization


@dataclass(eq=False)
class Codebook:
    """K embedding rows of dimension D, stored as a trainable parameter."""

    vectors: Parameter

    @classmethod
    def init(cls, k: int, d: int, rng: np.random.Generator) -> "Codebook":
        if k < 2 or d < 1:
            raise ValueError("codebook needs K >= 2 and D >= 1")
        return cls(Parameter(rng.uniform(-1.0 / k, 1.0 / k, size=(k, d)), "codebook"))

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, indices: np.ndarray) -> Tensor:
        return self.vectors.value[indices]


@dataclass
class VQResult:
    quantized: Tensor
    indices: np.ndarray
    codebook_loss: float
    commitment_loss: float


def nearest_codes(z: Tensor, vectors: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row per site; ties go to the smallest index."""
    flat = z.reshape(-1, z.shape[-1])
    d = (flat * flat).sum(axis=1, keepdims=True) - 2.0 * flat @ vectors.T + (vectors * vectors).sum(axis=1)
    return d.argmin(axis=1).reshape(z.shape[:-1])


def vector_quantize(z_e: Tensor, codebook: Codebook, beta: float = 0.25) -> VQResult:
    if z_e.shape[-1] != codebook.D:
        raise ShapeError(f"latent channels {z_e.shape[-1]} != codebook dim {codebook.D}")
    idx = nearest_codes(z_e, codebook.vectors.value)
    q = codebook.lookup(idx)
    dist = float(np.mean((z_e - q) ** 2))
    return VQResult(q, idx, dist, beta * dist)


class VectorQuantizer(Layer):
    """Nearest-row quantizer with straight-through gradients.

    backward(grad_q) returns grad_q plus the commitment gradient for z_e;
    codebook rows are trained only by the codebook loss term.
    """

    kind = "vq"

    def __init__(self, codebook: Codebook, beta: float = 0.25):
        self.codebook = codebook
        self.beta = beta
        self.last: VQResult | None = None

    def params(self):
        return [self.codebook.vectors]

    def forward(self, x):
        self._z = x
        self.last = vector_quantize(x, self.codebook, self.beta)
        return self.last.quantized

    def backward(self, grad, loss_weight: float = 1.0):
        z, res = self._z, self.last
        diff = z - res.quantized
        # d/dz of beta*mean|z - sg(e)|^2
        g_commit = loss_weight * self.beta * 2.0 * diff / diff.size
        # d/de of mean|sg(z) - e|^2, accumulated per selected row
        g_rows = (-loss_weight * 2.0 / diff.size) * diff.reshape(-1, diff.shape[-1])
        gcb = np.zeros_like(self.codebook.vectors.value)
        np.add.at(gcb, res.indices.ravel(), g_rows)
        self.codebook.vectors.grad += gcb
        return grad + g_commit


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** t)
        v_hat = p.v / (1.0 - beta2 ** t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + epsilon)
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(fn: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
                      epsilon: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences of ``fn`` at ``x``.

    ``x`` is perturbed in place and restored. The denominator per
    coordinate is max(|analytic|, |numeric|, 1e-8).
    """
    if analytic.shape != x.shape:
        raise ShapeError("analytic gradient shape differs from x")
    if not x.flags.c_contiguous:
        raise ValueError("x must be C-contiguous so it can be perturbed in place")
    worst = 0.0
    flat = x.reshape(-1)
    ana = analytic.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = fn(x)
        flat[i] = orig - epsilon
        fm = fn(x)
        flat[i] = orig
        num = (fp - fm) / (2.0 * epsilon)
        denom = max(abs(ana[i]), abs(num), 1e-8)
        worst = max(worst, abs(ana[i] - num) / denom)
    return worst
