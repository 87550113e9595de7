"""Zero-padded multichannel cross-correlation and the rotatable ResNet.

Image tensors are (H, W, C); kernel tensors are (p, p, C_out, C_in).  The
implemented operator is cross-correlation (no kernel flip) with zero padding
and "same" output size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft

from .parametrization import TransformParams
from .rain_kernel import discretize_kernel, discretize_kernel_partials

__all__ = [
    "conv_same",
    "depthwise_same",
    "conv_input_grad",
    "conv_kernel_grad",
    "cascade_conv",
    "ResBlock",
    "RotResNetWeights",
    "init_rot_resnet",
    "rot_resnet_forward",
    "rot_resnet_jvp",
    "preactivation_signs",
    "save_weights",
    "load_weights",
]

RESNET_KERNEL_SIZE = 3
_FFT_MIN_SIZE = 7


def _check_pair(x: np.ndarray, kernels: np.ndarray):
    if x.ndim != 3:
        raise ValueError(f"input must be (H, W, C), got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1] or kernels.shape[0] % 2 == 0:
        raise ValueError(f"kernels must be (p, p, C_out, C_in) with odd p, got {kernels.shape}")
    if kernels.shape[3] != x.shape[2]:
        raise ValueError(f"kernel expects {kernels.shape[3]} input channels, input has {x.shape[2]}")


def _shifts(p: int):
    for u in range(p):
        for v in range(p):
            yield u, v


def _conv_same_fft(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    H, W, _ = x.shape
    p = kernels.shape[0]
    r = p // 2
    shape = (sp_fft.next_fast_len(H + p - 1, real=True), sp_fft.next_fast_len(W + p - 1, real=True))
    X = sp_fft.rfft2(x, s=shape, axes=(0, 1))
    # cross-correlation is convolution with the flipped kernel
    Kf = sp_fft.rfft2(kernels[::-1, ::-1], s=shape, axes=(0, 1))
    full = sp_fft.irfft2(np.einsum("hwc,hwoc->hwo", X, Kf), s=shape, axes=(0, 1))
    return full[r : r + H, r : r + W]


def conv_same(x, kernels) -> np.ndarray:
    """out[..., o] = sum_c x[..., c] (cross-correlated with) kernels[:, :, o, c].

    Small kernels accumulate one matrix product per tap; kernels of size 7
    and up go through the FFT, which agrees to rounding error.  Either way
    the arithmetic is a fixed function of the inputs, so results are
    reproducible bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    _check_pair(x, kernels)
    H, W, C = x.shape
    p = kernels.shape[0]
    r = p // 2
    if p >= _FFT_MIN_SIZE:
        return _conv_same_fft(x, kernels)
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    out = np.zeros((H, W, kernels.shape[2]))
    for u, v in _shifts(p):
        k = kernels[u, v]
        if np.any(k):
            out += xp[u : u + H, v : v + W] @ k.T
    return out


def depthwise_same(x, filters) -> np.ndarray:
    """Apply each (p, p) filter in ``filters`` (F, p, p) to every channel.

    Returns (H, W, C, F); a single (p, p) filter gives (H, W, C).
    """
    x = np.asarray(x, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    single = filters.ndim == 2
    if single:
        filters = filters[None]
    if x.ndim != 3:
        raise ValueError(f"input must be (H, W, C), got shape {x.shape}")
    H, W, C = x.shape
    p = filters.shape[1]
    r = p // 2
    if p >= _FFT_MIN_SIZE:
        shape = (sp_fft.next_fast_len(H + p - 1, real=True), sp_fft.next_fast_len(W + p - 1, real=True))
        X = sp_fft.rfft2(x, s=shape, axes=(0, 1))
        Ff = sp_fft.rfft2(filters[:, ::-1, ::-1], s=shape, axes=(1, 2))
        full = sp_fft.irfft2(X[..., None] * Ff.transpose(1, 2, 0)[:, :, None, :], s=shape, axes=(0, 1))
        out = full[r : r + H, r : r + W]
        return out[..., 0] if single else out
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    out = np.zeros((H, W, C, filters.shape[0]))
    for u, v in _shifts(p):
        f = filters[:, u, v]
        if np.any(f):
            out += xp[u : u + H, v : v + W, :, None] * f
    return out[..., 0] if single else out


def conv_input_grad(grad_out, kernels) -> np.ndarray:
    """Adjoint of :func:`conv_same` w.r.t. its input."""
    kernels = np.asarray(kernels, dtype=np.float64)
    return conv_same(grad_out, kernels[::-1, ::-1].transpose(0, 1, 3, 2))


def conv_kernel_grad(x, grad_out, p: int) -> np.ndarray:
    """Adjoint of :func:`conv_same` w.r.t. the kernels, shape (p, p, C_out, C_in)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    H, W, C = x.shape
    r = p // 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    if p >= _FFT_MIN_SIZE:
        # correlate the padded input with the output gradient; lags 0..p-1 never wrap
        shape = (sp_fft.next_fast_len(H + p - 1, real=True), sp_fft.next_fast_len(W + p - 1, real=True))
        XP = sp_fft.rfft2(xp, s=shape, axes=(0, 1))
        G = sp_fft.rfft2(g, s=shape, axes=(0, 1))
        full = sp_fft.irfft2(np.einsum("hwo,hwc->hwoc", G.conj(), XP), s=shape, axes=(0, 1))
        return np.ascontiguousarray(full[:p, :p])
    g2 = g.reshape(H * W, g.shape[2])
    out = np.empty((p, p, g.shape[2], C))
    for u, v in _shifts(p):
        out[u, v] = g2.T @ xp[u : u + H, v : v + W].reshape(H * W, C)
    return out


def _tensor(k):
    return k.tensor if hasattr(k, "tensor") else np.asarray(k, dtype=np.float64)


def cascade_conv(rain_map, stages) -> np.ndarray:
    """Apply the kernel stages in order; depth 1 is a single :func:`conv_same`."""
    if len(stages) == 0:
        raise ValueError("cascade needs at least one stage")
    out = np.asarray(rain_map, dtype=np.float64)
    for stage in stages:
        out = conv_same(out, _tensor(stage))
    return out


# -- rotatable ResNet ----------------------------------------------------------


@dataclass
class ResBlock:
    """Two parameterized 3x3 layers; coefficients are (out, in, N3)."""

    coef1: np.ndarray
    bias1: np.ndarray
    coef2: np.ndarray
    bias2: np.ndarray


@dataclass
class RotResNetWeights:
    in_channels: int
    hidden: int
    out_channels: int
    blocks: list[ResBlock] = field(default_factory=list)
    in_proj: np.ndarray | None = None  # (hidden, in)
    out_proj: np.ndarray | None = None  # (out, hidden)

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("rotatable ResNet needs at least one block")
        n3 = 2 * RESNET_KERNEL_SIZE**2
        h = self.hidden
        for blk in self.blocks:
            for coef in (blk.coef1, blk.coef2):
                if coef.shape != (h, h, n3):
                    raise ValueError(f"block coefficients must be {(h, h, n3)}, got {coef.shape}")
            for bias in (blk.bias1, blk.bias2):
                if bias.shape != (h,):
                    raise ValueError(f"block bias must be ({h},), got {bias.shape}")
        if (self.in_channels != h) != (self.in_proj is not None):
            raise ValueError("input projection required exactly when in_channels != hidden")
        if (self.out_channels != h) != (self.out_proj is not None):
            raise ValueError("output projection required exactly when out_channels != hidden")
        if self.in_proj is not None and self.in_proj.shape != (h, self.in_channels):
            raise ValueError(f"in_proj must be {(h, self.in_channels)}")
        if self.out_proj is not None and self.out_proj.shape != (self.out_channels, h):
            raise ValueError(f"out_proj must be {(self.out_channels, h)}")
        arrays = [a for b in self.blocks for a in (b.coef1, b.bias1, b.coef2, b.bias2)]
        arrays += [a for a in (self.in_proj, self.out_proj) if a is not None]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("weights must be finite")

    def zeroed(self) -> "RotResNetWeights":
        """Same projections, all block weights and biases set to zero."""
        blocks = [ResBlock(*(np.zeros_like(a) for a in (b.coef1, b.bias1, b.coef2, b.bias2))) for b in self.blocks]
        return RotResNetWeights(self.in_channels, self.hidden, self.out_channels, blocks, self.in_proj, self.out_proj)


def _routing(rows: int, cols: int) -> np.ndarray:
    """0/1 matrix sending column c to row c % rows."""
    m = np.zeros((rows, cols))
    for c in range(cols):
        m[c % rows, c] = 1.0
    return m


def init_rot_resnet(in_channels: int, out_channels: int, hidden: int = 16, blocks: int = 2,
                    seed: int = 0, gain: float = 0.5, out_gain: float = 1.0) -> RotResNetWeights:
    """Seeded weights whose residual path routes inputs straight through.

    The input projection copies input channel c into hidden channel
    ``c % hidden``; the output projection sums hidden channels into output
    ``c % out_channels``.  For a 6 -> 3 merge net this makes the residual
    path equal to rain + background.  Block kernels are small random
    perturbations with zero biases.
    """
    if blocks < 1:
        raise ValueError("need at least one block")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x524E,)))
    n3 = 2 * RESNET_KERNEL_SIZE**2
    std = gain / (4.0 * np.sqrt(RESNET_KERNEL_SIZE**2 * hidden))
    blks = [
        ResBlock(
            rng.normal(0.0, std, (hidden, hidden, n3)),
            np.zeros(hidden),
            rng.normal(0.0, std, (hidden, hidden, n3)),
            np.zeros(hidden),
        )
        for _ in range(blocks)
    ]
    in_proj = _routing(hidden, in_channels) if in_channels != hidden else None
    out_proj = None
    if out_channels != hidden:
        n_used = min(in_channels, hidden)
        out_proj = np.zeros((out_channels, hidden))
        out_proj[:, :n_used] = _routing(out_channels, n_used)
        out_proj *= out_gain
    return RotResNetWeights(in_channels, hidden, out_channels, blks, in_proj, out_proj)


def _layer_kernel(coef: np.ndarray, params: TransformParams) -> np.ndarray:
    return discretize_kernel(coef.transpose(2, 0, 1), params)  # (3, 3, out, in)


def _check_input(x, weights):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != weights.in_channels:
        raise ValueError(f"expected (H, W, {weights.in_channels}) input, got {x.shape}")
    return x


def rot_resnet_forward(x, theta: float, weights: RotResNetWeights) -> np.ndarray:
    """Residual stack whose 3x3 kernels are discretized at angle ``theta`` (radians)."""
    return rot_resnet_jvp(x, theta, weights, tangent=False)


def rot_resnet_jvp(x, theta: float, weights: RotResNetWeights, tangent: bool = True):
    """Forward pass, and with ``tangent`` also d(output)/d(theta).

    Returns ``out`` or ``(out, dout)``.
    """
    x = _check_input(x, weights)
    params = TransformParams(float(theta))
    h = x @ weights.in_proj.T if weights.in_proj is not None else x
    dh = np.zeros_like(h) if tangent else None
    for blk in weights.blocks:
        k1 = _layer_kernel(blk.coef1, params)
        k2 = _layer_kernel(blk.coef2, params)
        a = conv_same(h, k1) + blk.bias1
        act = np.maximum(a, 0.0)
        out = h + conv_same(act, k2) + blk.bias2
        if tangent:
            dk1 = discretize_kernel_partials(blk.coef1.transpose(2, 0, 1), params)["theta"]
            dk2 = discretize_kernel_partials(blk.coef2.transpose(2, 0, 1), params)["theta"]
            da = conv_same(dh, k1) + conv_same(h, dk1)
            dact = np.where(a > 0, da, 0.0)
            dh = dh + conv_same(dact, k2) + conv_same(act, dk2)
        h = out
    if weights.out_proj is not None:
        h = h @ weights.out_proj.T
        if tangent:
            dh = dh @ weights.out_proj.T
    return (h, dh) if tangent else h


def preactivation_signs(x, theta: float, weights: RotResNetWeights) -> np.ndarray:
    """Boolean pattern of every inner ReLU (for kink detection)."""
    x = _check_input(x, weights)
    params = TransformParams(float(theta))
    h = x @ weights.in_proj.T if weights.in_proj is not None else x
    signs = []
    for blk in weights.blocks:
        a = conv_same(h, _layer_kernel(blk.coef1, params)) + blk.bias1
        signs.append(a > 0)
        h = h + conv_same(np.maximum(a, 0.0), _layer_kernel(blk.coef2, params)) + blk.bias2
    return np.concatenate([s.ravel() for s in signs])


_WEIGHTS_MAGIC = b"RFW1"


def save_weights(weights: RotResNetWeights, path) -> None:
    """RFW1 container: magic, u32 blocks/in/hidden/out, float64 layer-major."""
    parts = [_WEIGHTS_MAGIC, struct.pack("<4I", len(weights.blocks), weights.in_channels, weights.hidden, weights.out_channels)]
    arrays = []
    if weights.in_proj is not None:
        arrays.append(weights.in_proj)
    for b in weights.blocks:
        arrays += [b.coef1, b.bias1, b.coef2, b.bias2]
    if weights.out_proj is not None:
        arrays.append(weights.out_proj)
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> RotResNetWeights:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != _WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not an RFW1 weights file")
    nb, cin, hid, cout = struct.unpack("<4I", data[4:20])
    n3 = 2 * RESNET_KERNEL_SIZE**2
    shapes = []
    if cin != hid:
        shapes.append((hid, cin))
    shapes += [(hid, hid, n3), (hid,), (hid, hid, n3), (hid,)] * nb
    if cout != hid:
        shapes.append((cout, hid))
    need = sum(int(np.prod(s)) for s in shapes)
    flat = np.frombuffer(data[20:], dtype="<f8")
    if flat.size != need or len(data[20:]) % 8:
        raise ValueError(f"{path}: expected {need} float64 values, found {len(data[20:]) / 8:g}")
    arrays, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[pos : pos + n].reshape(s).astype(np.float64))
        pos += n
    in_proj = arrays.pop(0) if cin != hid else None
    out_proj = arrays.pop() if cout != hid else None
    blocks = [ResBlock(*arrays[4 * i : 4 * i + 4]) for i in range(nb)]
    return RotResNetWeights(cin, hid, cout, blocks, in_proj, out_proj)
