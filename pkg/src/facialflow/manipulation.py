"""
Forward and backward kernels of the hierarchical manipulation module.

Feature maps are float64 arrays of shape (C, H, W). Every differentiable
kernel has a matching ``*_backward`` that maps the gradient of a scalar
objective w.r.t. the output back to its inputs and weights.

Weight layouts follow the usual deep-learning convention:

* ``conv2d``:   kernel (C_out, C_in, 3, 3), stride 1, zero padding 1
* ``deconv2d``: kernel (C_in, C_out, 4, 4), stride 2, padding 1 (exact 2x)
"""

import struct
from dataclasses import dataclass, fields
from typing import List, Sequence, Tuple

import numpy as np

from .errors import FormatError, RangeError, ShapeError

EPSILON = 1e-5
PRELU_SLOPE = 0.25

# Toy three-level generator: channels and spatial size, coarse to fine.
TOY_CHANNELS = (32, 16, 8)
TOY_SIZES = (8, 16, 32)


def _as_map(x, name="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty (C, H, W) map, got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# Convolution, 3x3 / stride 1 / pad 1
# ---------------------------------------------------------------------------

def _check_conv(x, kernel, bias):
    x = _as_map(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv kernel must be (C_out, C_in, 3, 3), got {kernel.shape}")
    if kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, got {x.shape[0]}")
    if bias.size != kernel.shape[0]:
        raise ShapeError("bias length must equal the kernel's output channels")
    return x, kernel, bias


def conv2d(x, kernel, bias) -> np.ndarray:
    """Cross-correlation with a 3x3 kernel, stride 1, zero padding 1 (size-preserving)."""
    x, kernel, bias = _check_conv(x, kernel, bias)
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((kernel.shape[0], h, w))
    for a in range(3):
        for b in range(3):
            out += np.tensordot(kernel[:, :, a, b], xp[:, a:a + h, b:b + w], axes=(1, 0))
    return out + bias[:, None, None]


def conv2d_backward(x, kernel, grad_out):
    """Gradients (d_input, d_kernel, d_bias) of conv2d."""
    x, kernel, _ = _check_conv(x, kernel, np.zeros(np.shape(kernel)[0]))
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    g_xp = np.zeros_like(xp)
    g_k = np.zeros_like(kernel)
    for a in range(3):
        for b in range(3):
            window = xp[:, a:a + h, b:b + w]
            g_k[:, :, a, b] = np.tensordot(grad_out, window, axes=([1, 2], [1, 2]))
            g_xp[:, a:a + h, b:b + w] += np.tensordot(kernel[:, :, a, b], grad_out, axes=(0, 0))
    return g_xp[:, 1:-1, 1:-1], g_k, grad_out.sum(axis=(1, 2))


# ---------------------------------------------------------------------------
# Transposed convolution, 4x4 / stride 2 / pad 1
# ---------------------------------------------------------------------------

def _check_deconv(x, kernel, bias):
    x = _as_map(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if kernel.ndim != 4 or kernel.shape[2:] != (4, 4):
        raise ShapeError(f"deconv kernel must be (C_in, C_out, 4, 4), got {kernel.shape}")
    if kernel.shape[0] != x.shape[0]:
        raise ShapeError(f"kernel expects {kernel.shape[0]} input channels, got {x.shape[0]}")
    if bias.size != kernel.shape[1]:
        raise ShapeError("bias length must equal the kernel's output channels")
    return x, kernel, bias


def deconv2d(x, kernel, bias) -> np.ndarray:
    """Transposed convolution that exactly doubles H and W.

    Input pixel (i, j) scatters ``x[c, i, j] * kernel[c, o, a, b]`` to output
    (2i - 1 + a, 2j - 1 + b); contributions falling outside the doubled frame
    are cropped.
    """
    x, kernel, bias = _check_deconv(x, kernel, bias)
    _, h, w = x.shape
    buf = np.zeros((kernel.shape[1], 2 * h + 2, 2 * w + 2))
    for a in range(4):
        for b in range(4):
            buf[:, a:a + 2 * h:2, b:b + 2 * w:2] += np.tensordot(
                kernel[:, :, a, b], x, axes=(0, 0))
    return buf[:, 1:2 * h + 1, 1:2 * w + 1] + bias[:, None, None]


def deconv2d_backward(x, kernel, grad_out):
    """Gradients (d_input, d_kernel, d_bias) of deconv2d."""
    x, kernel, _ = _check_deconv(x, kernel, np.zeros(np.shape(kernel)[1]))
    _, h, w = x.shape
    g_buf = np.zeros((kernel.shape[1], 2 * h + 2, 2 * w + 2))
    g_buf[:, 1:2 * h + 1, 1:2 * w + 1] = grad_out
    g_x = np.zeros_like(x)
    g_k = np.zeros_like(kernel)
    for a in range(4):
        for b in range(4):
            window = g_buf[:, a:a + 2 * h:2, b:b + 2 * w:2]
            g_x += np.tensordot(kernel[:, :, a, b], window, axes=(1, 0))
            g_k[:, :, a, b] = np.tensordot(x, window, axes=([1, 2], [1, 2]))
    return g_x, g_k, grad_out.sum(axis=(1, 2))


# ---------------------------------------------------------------------------
# Bilinear 2x upsampling
# ---------------------------------------------------------------------------

def _upsample_matrix(n):
    """(2n, n) interpolation matrix with half-pixel centres.

    Output index d samples the input at s = (d + 0.5) / 2 - 0.5, clamped to
    [0, n - 1], and linearly blends its two neighbours.
    """
    mat = np.zeros((2 * n, n))
    src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = np.arange(2 * n)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def upsample_bilinear(x) -> np.ndarray:
    """2x bilinear upsampling (half-pixel centres, edge clamped)."""
    x = _as_map(x)
    _, h, w = x.shape
    return np.einsum("ph,chw,qw->cpq", _upsample_matrix(h), x, _upsample_matrix(w))


def upsample_bilinear_backward(grad_out) -> np.ndarray:
    grad_out = _as_map(grad_out, "grad_out")
    _, h2, w2 = grad_out.shape
    return np.einsum("ph,cpq,qw->chw", _upsample_matrix(h2 // 2), grad_out,
                     _upsample_matrix(w2 // 2))


# ---------------------------------------------------------------------------
# Instance normalization and activation
# ---------------------------------------------------------------------------

def instance_norm(x, epsilon=EPSILON):
    """Per-channel standardisation.

    Returns ``(normalized, mu, sigma)`` with mu the spatial mean and
    sigma = sqrt(population variance + epsilon).
    """
    x = _as_map(x)
    mu = x.mean(axis=(1, 2))
    centred = x - mu[:, None, None]
    sigma = np.sqrt((centred ** 2).mean(axis=(1, 2)) + epsilon)
    return centred / sigma[:, None, None], mu, sigma


def instance_norm_backward(normalized, sigma, grad_out) -> np.ndarray:
    g_mean = grad_out.mean(axis=(1, 2), keepdims=True)
    gn_mean = (grad_out * normalized).mean(axis=(1, 2), keepdims=True)
    return (grad_out - g_mean - normalized * gn_mean) / sigma[:, None, None]


def prelu(x, slope=PRELU_SLOPE):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, slope * x)


def prelu_backward(x, slope, grad_out):
    """Gradients (d_input, d_slope) of prelu."""
    return (np.where(x > 0, grad_out, slope * grad_out),
            float(np.sum(grad_out * np.minimum(x, 0.0))))


# ---------------------------------------------------------------------------
# Spatially-adaptive modulation
# ---------------------------------------------------------------------------

@dataclass
class SpadeParams:
    """Weights of the gamma/beta generator: shared 3x3 conv -> PReLU -> two 3x3 convs."""

    shared_kernel: np.ndarray
    shared_bias: np.ndarray
    gamma_kernel: np.ndarray
    gamma_bias: np.ndarray
    beta_kernel: np.ndarray
    beta_bias: np.ndarray
    slope: float = PRELU_SLOPE
    epsilon: float = EPSILON

    def __post_init__(self):
        if self.epsilon <= 0:
            raise RangeError("epsilon must be positive")
        hidden = np.shape(self.shared_kernel)[0]
        for name in ("gamma_kernel", "beta_kernel"):
            k = np.shape(getattr(self, name))
            if len(k) != 4 or k[1] != hidden:
                raise ShapeError(f"{name} must take {hidden} hidden channels, got {k}")
        if np.shape(self.gamma_kernel) != np.shape(self.beta_kernel):
            raise ShapeError("gamma and beta kernels must have the same shape")

    @property
    def channels(self) -> int:
        return np.shape(self.gamma_kernel)[0]

    @classmethod
    def random(cls, channels, flow_channels, hidden, rng, std=0.2, **kw):
        n = lambda *shape: rng.normal(0.0, std, shape)
        return cls(n(hidden, flow_channels, 3, 3), n(hidden),
                   n(channels, hidden, 3, 3), 1.0 + n(channels),
                   n(channels, hidden, 3, 3), n(channels), **kw)

    @classmethod
    def identity(cls, channels, flow_channels, hidden, **kw):
        """Zero kernels, gamma bias 1, beta bias 0: gamma = 1 and beta = 0 everywhere."""
        z = np.zeros
        return cls(z((hidden, flow_channels, 3, 3)), z(hidden),
                   z((channels, hidden, 3, 3)), np.ones(channels),
                   z((channels, hidden, 3, 3)), z(channels), **kw)

    def arrays(self):
        return [np.asarray(getattr(self, f.name), dtype=np.float64)
                for f in fields(self) if f.name not in ("slope", "epsilon")]


def spade_forward(h_enc, h_flow, h_dec, p: SpadeParams):
    """h_dec * (gamma(h_flow) * IN(h_enc) + beta(h_flow)); returns (output, cache)."""
    h_enc, h_flow, h_dec = _as_map(h_enc, "h_enc"), _as_map(h_flow, "h_flow"), _as_map(h_dec, "h_dec")
    if not (h_enc.shape[1:] == h_flow.shape[1:] == h_dec.shape[1:]):
        raise ShapeError("h_enc, h_flow and h_dec must share H and W")
    if h_enc.shape[0] != h_dec.shape[0] or h_enc.shape[0] != p.channels:
        raise ShapeError("h_enc, h_dec and the modulation kernels must share C")
    pre = conv2d(h_flow, p.shared_kernel, p.shared_bias)
    hidden = prelu(pre, p.slope)
    gamma = conv2d(hidden, p.gamma_kernel, p.gamma_bias)
    beta = conv2d(hidden, p.beta_kernel, p.beta_bias)
    normalized, _, sigma = instance_norm(h_enc, p.epsilon)
    modulated = gamma * normalized + beta
    cache = dict(h_flow=h_flow, h_dec=h_dec, pre=pre, hidden=hidden, gamma=gamma,
                 normalized=normalized, sigma=sigma, modulated=modulated, params=p)
    return h_dec * modulated, cache


def spade_modulate(h_enc, h_flow, h_dec, p: SpadeParams) -> np.ndarray:
    return spade_forward(h_enc, h_flow, h_dec, p)[0]


def spade_backward(cache, grad_out) -> dict:
    """Gradients of spade_forward keyed by input / SpadeParams field name."""
    p = cache["params"]
    g_dec = grad_out * cache["modulated"]
    g_mod = grad_out * cache["h_dec"]
    g_gamma = g_mod * cache["normalized"]
    g_enc = instance_norm_backward(cache["normalized"], cache["sigma"], g_mod * cache["gamma"])
    g_hid_g, g_gk, g_gb = conv2d_backward(cache["hidden"], p.gamma_kernel, g_gamma)
    g_hid_b, g_bk, g_bb = conv2d_backward(cache["hidden"], p.beta_kernel, g_mod)
    g_pre, g_slope = prelu_backward(cache["pre"], p.slope, g_hid_g + g_hid_b)
    g_flow, g_sk, g_sb = conv2d_backward(cache["h_flow"], p.shared_kernel, g_pre)
    return dict(h_enc=g_enc, h_flow=g_flow, h_dec=g_dec,
                shared_kernel=g_sk, shared_bias=g_sb,
                gamma_kernel=g_gk, gamma_bias=g_gb,
                beta_kernel=g_bk, beta_bias=g_bb, slope=g_slope)


# ---------------------------------------------------------------------------
# Progressive fade-in
# ---------------------------------------------------------------------------

def fade_in_paths(h_dec, deconv, conv_prev):
    """The learned path conv(deconv(h)) and the fixed path conv(up(h)).

    ``deconv`` and ``conv_prev`` are (kernel, bias) pairs; the same
    ``conv_prev`` weights are applied to both paths.
    """
    learned = conv2d(deconv2d(h_dec, *deconv), *conv_prev)
    fixed = conv2d(upsample_bilinear(h_dec), *conv_prev)
    return learned, fixed


def fade_in_blend(h_dec, alpha, deconv, conv_prev) -> np.ndarray:
    """alpha * conv(deconv(h)) + (1 - alpha) * conv(up(h)); doubles H and W."""
    if not 0.0 <= alpha <= 1.0:
        raise RangeError(f"alpha must lie in [0, 1], got {alpha}")
    learned, fixed = fade_in_paths(h_dec, deconv, conv_prev)
    return alpha * learned + (1.0 - alpha) * fixed


def fade_in_backward(h_dec, alpha, deconv, conv_prev, grad_out) -> dict:
    h_dec = _as_map(h_dec, "h_dec")
    up = upsample_bilinear(h_dec)
    dec = deconv2d(h_dec, *deconv)
    g_dec_out, g_ck1, g_cb1 = conv2d_backward(dec, conv_prev[0], alpha * grad_out)
    g_up, g_ck2, g_cb2 = conv2d_backward(up, conv_prev[0], (1.0 - alpha) * grad_out)
    g_h1, g_dk, g_db = deconv2d_backward(h_dec, deconv[0], g_dec_out)
    g_h = g_h1 + upsample_bilinear_backward(g_up)
    return dict(h_dec=g_h, deconv_kernel=g_dk, deconv_bias=g_db,
                conv_kernel=g_ck1 + g_ck2, conv_bias=g_cb1 + g_cb2)


# ---------------------------------------------------------------------------
# Toy three-level generator head
# ---------------------------------------------------------------------------

@dataclass
class ToyGenerator:
    """Hierarchical modulation at 8x8/32ch, 16x16/16ch and 32x32/8ch.

    At every level the decoder features are modulated by SPADE; between
    levels the result is doubled in resolution with the fade-in blend and
    mapped to the next level's channel count by ``conv_prev``.
    """

    spade: List[SpadeParams]
    deconv: List[Tuple[np.ndarray, np.ndarray]]
    conv_prev: List[Tuple[np.ndarray, np.ndarray]]
    flow_channels: Tuple[int, ...] = (8, 4, 2)

    @classmethod
    def create(cls, rng, channels=TOY_CHANNELS, flow_channels=(8, 4, 2), std=0.1):
        spade = [SpadeParams.random(c, fc, fc, rng, std=std)
                 for c, fc in zip(channels, flow_channels)]
        deconv = [(rng.normal(0, std, (c, c, 4, 4)), rng.normal(0, std, c))
                  for c in channels[:-1]]
        conv_prev = [(rng.normal(0, std, (c_next, c, 3, 3)), rng.normal(0, std, c_next))
                     for c, c_next in zip(channels[:-1], channels[1:])]
        return cls(spade, deconv, conv_prev, tuple(flow_channels))

    def forward(self, enc_features, flow_features, h_dec, alpha=1.0) -> np.ndarray:
        """Run coarse-to-fine; ``enc_features``/``flow_features`` list one map per level."""
        if not (len(enc_features) == len(flow_features) == len(self.spade)):
            raise ShapeError("need one encoder and one flow map per level")
        h = h_dec
        for level, params in enumerate(self.spade):
            h = spade_modulate(enc_features[level], flow_features[level], h, params)
            if level < len(self.deconv):
                h = fade_in_blend(h, alpha, self.deconv[level], self.conv_prev[level])
        return h

    def tensors(self) -> List[np.ndarray]:
        out = []
        for p in self.spade:
            out.extend(p.arrays())
        for k, b in self.deconv + self.conv_prev:
            out.extend([np.asarray(k), np.asarray(b)])
        return out

    def with_tensors(self, tensors) -> "ToyGenerator":
        """A copy whose weights are taken, in :meth:`tensors` order, from ``tensors``."""
        it = iter(tensors)
        spade = [SpadeParams(*[next(it) for _ in range(6)], slope=p.slope, epsilon=p.epsilon)
                 for p in self.spade]
        deconv = [(next(it), next(it)) for _ in self.deconv]
        conv_prev = [(next(it), next(it)) for _ in self.conv_prev]
        return ToyGenerator(spade, deconv, conv_prev, self.flow_channels)


# ---------------------------------------------------------------------------
# F3T tensor dump
# ---------------------------------------------------------------------------

F3T_MAGIC = b"F3T1"


def encode_tensor(array) -> bytes:
    """``F3T1``, u32 rank, u32 dims[rank], f32 payload (C order), little-endian."""
    array = np.asarray(array)
    return (F3T_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
            + array.astype("<f4").tobytes())


def _decode_tensor_at(payload, offset):
    if payload[offset:offset + 4] != F3T_MAGIC:
        raise FormatError("bad F3T magic")
    if len(payload) < offset + 8:
        raise FormatError("truncated F3T header")
    (rank,) = struct.unpack_from("<I", payload, offset + 4)
    head = offset + 8 + 4 * rank
    if len(payload) < head:
        raise FormatError("truncated F3T header")
    dims = struct.unpack_from(f"<{rank}I", payload, offset + 8)
    count = int(np.prod(dims, dtype=np.int64))
    end = head + 4 * count
    if len(payload) < end:
        raise FormatError("truncated F3T payload")
    data = np.frombuffer(payload, dtype="<f4", count=count, offset=head).reshape(dims)
    return data.astype(np.float32), end


def decode_tensor(payload: bytes) -> np.ndarray:
    array, end = _decode_tensor_at(payload, 0)
    if end != len(payload):
        raise FormatError(f"{len(payload) - end} trailing bytes after F3T record")
    return array


def encode_tensors(arrays: Sequence) -> bytes:
    """Concatenated F3T records."""
    return b"".join(encode_tensor(a) for a in arrays)


def decode_tensors(payload: bytes) -> List[np.ndarray]:
    out, offset = [], 0
    while offset < len(payload):
        array, offset = _decode_tensor_at(payload, offset)
        out.append(array)
    return out
