"""Network layers and quantization surrogates on top of :mod:`cae.tensor`.

Image tensors are NCHW. Functions accept a single CHW image as well and
return a result of the same rank.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Rng, ShapeError, Tensor, record

LEAKY_SLOPE = 0.2


class SurrogateMode(str, enum.Enum):
    ROUND_STE = "round_ste"
    STOCHASTIC_ROUND = "stochastic_round"
    ADDITIVE_NOISE = "additive_noise"
    NONE = "none"


def round_half_away(y: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(y) + 0.5), y)


def _batched(x: Tensor):
    """Lift CHW to 1CHW; returns (tensor, squeeze_back)."""
    if x.data.ndim == 4:
        return x, False
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    raise ShapeError("expected CHW or NCHW", x.shape, ("N", "C", "H", "W"))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


# -- padding ---------------------------------------------------------------

def _reflect_index(n: int, p: int) -> np.ndarray:
    """Source index of every padded position; wide pads reflect repeatedly."""
    return np.pad(np.arange(n), p, mode="reflect")


def _fold(g: np.ndarray, src: np.ndarray, n: int, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    out = np.zeros((n,) + g.shape[1:])
    np.add.at(out, src, g)
    return np.moveaxis(out, 0, axis)


def pad2d(x: Tensor, p: int, mode: str = "mirror") -> Tensor:
    """Pad the last two axes by ``p`` on each side (mirror or zero)."""
    if p == 0:
        return x
    if mode == "mirror":
        h, w = x.shape[-2:]
        ih, iw = _reflect_index(h, p), _reflect_index(w, p)
        out = x.data[..., ih, :][..., iw]

        def bwd(g):
            g = _fold(g, iw, w, g.ndim - 1)
            return (_fold(g, ih, h, g.ndim - 2),)
    elif mode == "zero":
        widths = [(0, 0)] * (x.data.ndim - 2) + [(p, p), (p, p)]
        out = np.pad(x.data, widths)

        def bwd(g):
            return (g[..., p:-p, p:-p].copy(),)
    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    return record(f"pad_{mode}", (x,), out, bwd)


# -- convolution -------------------------------------------------------------

@dataclass
class ConvSpec:
    """KxK convolution; ``padding_mode`` is 'mirror' (reflect then valid) or 'zero'."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding_mode: str = "mirror"
    weight: Tensor | None = None
    bias: Tensor | None = None

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding_mode not in ("mirror", "zero"):
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")
        k = self.kernel_size
        if self.weight is None:
            self.weight = Tensor(np.zeros((self.out_channels, self.in_channels, k, k)),
                                 requires_grad=True)
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.out_channels), requires_grad=True)
        if self.weight.shape != (self.out_channels, self.in_channels, k, k):
            raise ShapeError("ConvSpec.weight", self.weight.shape,
                             (self.out_channels, self.in_channels, k, k))

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    def init_uniform(self, rng: Rng, gain: float = 1.0) -> None:
        fan_in = self.in_channels * self.kernel_size ** 2
        bound = gain * np.sqrt(3.0 / fan_in)
        self.weight.data[...] = rng.uniform(self.weight.shape, -bound, bound)
        self.bias.data[...] = 0.0

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return -(-(h + 2 * p - k + 1) // s), -(-(w + 2 * p - k + 1) // s)


def _conv_valid(x: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    n, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    if c != ci:
        raise ShapeError("conv2d channels", (c,), (ci,))
    if h < k or w < k:
        raise ValueError(f"conv2d: spatial extent {(h, w)} smaller than kernel {k}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bwd(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gf.T @ cols).reshape(weight.shape)
        gb = gf.sum(axis=0)
        gcols = (gf @ wmat).reshape(n, ho, wo, c, k, k)
        gx = np.zeros((n, c, h, w))
        span_h = (ho - 1) * stride + 1
        span_w = (wo - 1) * stride + 1
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + span_h:stride, j:j + span_w:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return record("conv2d", (x, weight, bias), np.ascontiguousarray(out), bwd)


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Strided cross-correlation with mirror or zero padding of K//2 per side."""
    xb, squeeze = _batched(x)
    if xb.shape[1] != spec.in_channels:
        raise ShapeError("conv2d channels", (xb.shape[1],), (spec.in_channels,))
    xp = pad2d(xb, spec.padding, spec.padding_mode)
    y = _conv_valid(xp, spec.weight, spec.bias, spec.stride)
    if y.shape[2] == 0 or y.shape[3] == 0:
        raise ValueError("conv2d: zero-size output")
    return _unbatch(y, squeeze)


# -- sub-pixel reorganization -----------------------------------------------

def _depth_to_space(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    c_out = c // (r * r)
    return a.reshape(n, c_out, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c_out, h * r, w * r)


def _space_to_depth(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def subpixel(x: Tensor, r: int, direction: str = "up") -> Tensor:
    """Depth-to-space ('up') or its inverse space-to-depth ('down')."""
    xb, squeeze = _batched(x)
    _, c, h, w = xb.shape
    if direction == "up":
        if c % (r * r):
            raise ValueError(f"subpixel up: channels {c} not divisible by {r * r}")
        y = record("subpixel_up", (xb,), _depth_to_space(xb.data, r),
                   lambda g: (_space_to_depth(g, r),))
    elif direction == "down":
        if h % r or w % r:
            raise ValueError(f"subpixel down: spatial {(h, w)} not divisible by {r}")
        y = record("subpixel_down", (xb,), _space_to_depth(xb.data, r),
                   lambda g: (_depth_to_space(g, r),))
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return _unbatch(y, squeeze)


# -- quantization --------------------------------------------------------------

def quantize_surrogate(y: Tensor, mode: SurrogateMode | str, rng: Rng | None = None) -> Tensor:
    """Training-time stand-in for rounding.

    round_ste and stochastic_round pass the upstream gradient unchanged;
    additive_noise has its true (identity) derivative; none is the identity.
    """
    mode = SurrogateMode(mode)
    if mode is SurrogateMode.ROUND_STE:
        out = round_half_away(y.data)
    elif mode is SurrogateMode.STOCHASTIC_ROUND:
        fl = np.floor(y.data)
        out = fl + (rng.uniform(y.shape) < (y.data - fl))
    elif mode is SurrogateMode.ADDITIVE_NOISE:
        out = y.data + rng.uniform(y.shape, -0.5, 0.5)
    else:
        out = y.data.copy()
    return record(f"quantize_{mode.value}", (y,), out, lambda g: (g,))


def clip_st(x: Tensor, lo: float = 0.0, hi: float = 255.0) -> Tensor:
    """Clamp to [lo, hi] with a constant unit derivative everywhere."""
    if lo >= hi:
        raise ValueError(f"clip_st: lo={lo} must be below hi={hi}")
    return record("clip_st", (x,), np.clip(x.data, lo, hi), lambda g: (g,))


# -- pointwise -----------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    return record("leaky_relu", (x,), np.where(pos, x.data, slope * x.data),
                  lambda g: (np.where(pos, g, slope * g),))


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1, 1, 1) if ndim == 3 else (1, -1, 1, 1))


def normalize(x: Tensor, mean, std) -> Tensor:
    """Per-channel ``(x - mean) / std`` with fixed constants."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std == 0):
        raise ValueError("normalize: zero standard deviation")
    m = _channel_view(mean, x.data.ndim)
    s = _channel_view(std, x.data.ndim)
    return record("normalize", (x,), (x.data - m) / s, lambda g: (g / s,))


def denormalize(x: Tensor, mean, std) -> Tensor:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std == 0):
        raise ValueError("denormalize: zero standard deviation")
    m = _channel_view(mean, x.data.ndim)
    s = _channel_view(std, x.data.ndim)
    return record("denormalize", (x,), x.data * s + m, lambda g: (g * s,))


def channel_scale(x: Tensor, log_scales: Tensor, inverse: bool = False) -> Tensor:
    """Multiply (or divide) each channel by ``exp(log_scales)``; NCHW or CHW."""
    c_axis = x.data.ndim - 3
    if x.shape[c_axis] != log_scales.shape[0]:
        raise ShapeError("channel_scale", (x.shape[c_axis],), log_scales.shape)
    sign = -1.0 if inverse else 1.0
    lam = _channel_view(np.exp(sign * log_scales.data), x.data.ndim)
    out = x.data * lam
    axes = tuple(i for i in range(x.data.ndim) if i != c_axis)

    def bwd(g):
        return g * lam, sign * (g * out).sum(axis=axes)

    return record("channel_scale", (x, log_scales), out, bwd)


def channel_mask(x: Tensor, mask) -> Tensor:
    """Zero out channels where ``mask`` is 0 (constant mask, no gradient to it)."""
    m = _channel_view(np.asarray(mask, dtype=np.float64), x.data.ndim)
    return record("channel_mask", (x,), x.data * m, lambda g: (g * m,))


def add_noise(x: Tensor, noise: np.ndarray) -> Tensor:
    return record("add_noise", (x,), x.data + noise, lambda g: (g,))


def sum_squared_error(a: Tensor, target: np.ndarray) -> Tensor:
    diff = a.data - target
    return record("sse", (a,), np.array((diff * diff).sum()), lambda g: (2.0 * float(g) * diff,))
