"""Forward and backward kernels for every layer primitive of the network.

All functions are pure: they take numpy arrays in ``(n, c, h, w)`` layout and
return new arrays. Convolutions are cross-correlations (no kernel flip) and
are evaluated one kernel tap at a time, so each tap is a single batched
matmul over channel groups.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import check_tensor

Pair = Tuple[int, int]


def _pair(v) -> Pair:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Pair = (1, 1)
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    dilation: Pair = (1, 1)
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ConfigError(f"channel counts and groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )
        if min(self.kernel + self.stride + self.dilation) < 1 or min(self.padding) < 0:
            raise ConfigError(f"invalid geometry in {self}")

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, h: int, w: int) -> Pair:
        """Output size of the convolution for an ``h x w`` input."""
        return (
            conv_out_size(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0]),
            conv_out_size(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1]),
        )

    def transposed_output_hw(self, h: int, w: int) -> Pair:
        if self.dilation != (1, 1):
            raise ConfigError("transposed convolutions do not support dilation")
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return (h - 1) * sh - 2 * ph + kh, (w - 1) * sw - 2 * pw + kw

    def adjoint(self) -> "ConvSpec":
        """The convolution whose input-gradient is this spec's transposed conv."""
        return dataclasses.replace(self, in_channels=self.out_channels, out_channels=self.in_channels)

    def kernel_shape(self, transposed: bool = False) -> Tuple[int, int, int, int]:
        kh, kw = self.kernel
        if transposed:
            return (self.in_channels, self.out_channels // self.groups, kh, kw)
        return (self.out_channels, self.in_channels // self.groups, kh, kw)


@dataclass
class ConvWeights:
    """Kernels of shape ``(out, in/g, kh, kw)``; transposed convs store ``(in, out/g, kh, kw)``."""

    kernels: np.ndarray
    bias: Optional[np.ndarray] = None


def conv_out_size(size: int, k: int, s: int, p: int, d: int = 1) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def _check_weights(spec: ConvSpec, weights: ConvWeights, transposed: bool = False):
    want = spec.kernel_shape(transposed)
    if weights.kernels.shape != want:
        raise ShapeError(f"kernel shape {weights.kernels.shape} does not match {want}")
    if spec.has_bias:
        if weights.bias is None or weights.bias.shape != (spec.out_channels,):
            raise ShapeError(f"bias of length {spec.out_channels} required")
    elif weights.bias is not None:
        raise ShapeError("spec declares no bias but weights carry one")


def _pad(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _tap_slices(i: int, j: int, spec: ConvSpec, ho: int, wo: int):
    (dh, dw), (sh, sw) = spec.dilation, spec.stride
    r0, c0 = i * dh, j * dw
    return slice(r0, r0 + sh * (ho - 1) + 1, sh), slice(c0, c0 + sw * (wo - 1) + 1, sw)


def _correlate(xp: np.ndarray, kernels: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Grouped cross-correlation of an already padded input; no bias."""
    n, c = xp.shape[:2]
    g = spec.groups
    cout, cg, kh, kw = kernels.shape
    og = cout // g
    kg = kernels.reshape(g, og, cg, kh, kw)
    out = np.zeros((n, g, og, ho * wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _tap_slices(i, j, spec, ho, wo)
            tap = xp[:, :, rs, cs].reshape(n, g, cg, ho * wo)
            if cg == 1 and og == 1:
                out += kg[None, :, :, 0, i, j, None] * tap
            else:
                out += kg[:, :, :, i, j] @ tap
    return out.reshape(n, cout, ho, wo)


def _correlate_grad_input(go: np.ndarray, kernels: np.ndarray, spec: ConvSpec, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`_correlate` with respect to its (unpadded) input."""
    n, cout, ho, wo = go.shape
    g = spec.groups
    _, cg, kh, kw = kernels.shape
    og = cout // g
    ph, pw = spec.padding
    kg = kernels.reshape(g, og, cg, kh, kw)
    gog = go.reshape(n, g, og, ho * wo)
    gxp = np.zeros((n, g * cg, h + 2 * ph, w + 2 * pw), dtype=go.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _tap_slices(i, j, spec, ho, wo)
            if cg == 1 and og == 1:
                gtap = kg[None, :, :, 0, i, j, None] * gog
            else:
                gtap = kg[:, :, :, i, j].transpose(0, 2, 1) @ gog
            gxp[:, :, rs, cs] += gtap.reshape(n, g * cg, ho, wo)
    return np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w])


def _correlate_grad_kernel(xp: np.ndarray, go: np.ndarray, spec: ConvSpec, kshape) -> np.ndarray:
    n, cout, ho, wo = go.shape
    g = spec.groups
    _, cg, kh, kw = kshape
    og = cout // g
    gog = go.reshape(n, g, og, ho * wo)
    gk = np.zeros((g, og, cg, kh, kw), dtype=go.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _tap_slices(i, j, spec, ho, wo)
            tap = xp[:, :, rs, cs].reshape(n, g, cg, ho * wo)
            if cg == 1 and og == 1:
                gk[:, 0, 0, i, j] = np.einsum("ngp,ngp->g", gog[:, :, 0], tap[:, :, 0])
            else:
                gk[:, :, :, i, j] = (gog @ tap.transpose(0, 1, 3, 2)).sum(axis=0)
    return gk.reshape(kshape)


def _check_input(x, spec: ConvSpec):
    s = check_tensor(x, "input")
    if s.c != spec.in_channels:
        raise ShapeError(f"input has {s.c} channels, spec expects {spec.in_channels}")
    return s


def conv2d_forward(x: np.ndarray, spec: ConvSpec, weights: ConvWeights) -> np.ndarray:
    s = _check_input(x, spec)
    _check_weights(spec, weights)
    ho, wo = spec.output_hw(s.h, s.w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"convolution output {ho}x{wo} is empty for input {x.shape}")
    xp = _pad(x, *spec.padding)
    out = _correlate(xp, weights.kernels, spec, ho, wo)
    if spec.has_bias:
        out += weights.bias[None, :, None, None]
    return out


def conv2d_backward(x, spec: ConvSpec, weights: ConvWeights, grad_out):
    """Return ``(grad_input, grad_kernels, grad_bias)``; ``grad_bias`` is None without bias."""
    s = _check_input(x, spec)
    ho, wo = spec.output_hw(s.h, s.w)
    if grad_out.shape != (s.n, spec.out_channels, ho, wo):
        raise ShapeError(f"grad_output shape {grad_out.shape} != {(s.n, spec.out_channels, ho, wo)}")
    grad_x = _correlate_grad_input(grad_out, weights.kernels, spec, s.h, s.w)
    grad_k = _correlate_grad_kernel(_pad(x, *spec.padding), grad_out, spec, weights.kernels.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if spec.has_bias else None
    return grad_x, grad_k, grad_b


def transposed_conv2d_forward(x: np.ndarray, spec: ConvSpec, weights: ConvWeights) -> np.ndarray:
    s = _check_input(x, spec)
    _check_weights(spec, weights, transposed=True)
    ho, wo = spec.transposed_output_hw(s.h, s.w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed convolution output {ho}x{wo} is empty for input {x.shape}")
    out = _correlate_grad_input(x, weights.kernels, spec.adjoint(), ho, wo)
    if spec.has_bias:
        out += weights.bias[None, :, None, None]
    return out


def transposed_conv2d_backward(x, spec: ConvSpec, weights: ConvWeights, grad_out):
    s = _check_input(x, spec)
    ho, wo = spec.transposed_output_hw(s.h, s.w)
    if grad_out.shape != (s.n, spec.out_channels, ho, wo):
        raise ShapeError(f"grad_output shape {grad_out.shape} != {(s.n, spec.out_channels, ho, wo)}")
    adj = spec.adjoint()
    gp = _pad(grad_out, *spec.padding)
    grad_x = _correlate(gp, weights.kernels, adj, s.h, s.w)
    grad_k = _correlate_grad_kernel(gp, x, adj, weights.kernels.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if spec.has_bias else None
    return grad_x, grad_k, grad_b


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    n, c, h, w = check_tensor(x)
    if groups < 1 or c % groups:
        raise ShapeError(f"{c} channels cannot be shuffled into {groups} groups")
    return np.ascontiguousarray(
        x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)
    )


def channel_shuffle_backward(grad_out: np.ndarray, groups: int) -> np.ndarray:
    return channel_shuffle(grad_out, grad_out.shape[1] // groups)


def _pool_geometry(x, kernel, stride, padding):
    n, c, h, w = check_tensor(x)
    spec = ConvSpec(c, c, kernel, stride, padding, groups=c)
    ho, wo = spec.output_hw(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pooling output {ho}x{wo} is empty for input {x.shape}")
    return spec, ho, wo


def max_pool2d(x: np.ndarray, kernel, stride, padding=0):
    """Return ``(output, argmax)``; ``argmax`` holds the winning tap index per output."""
    spec, ho, wo = _pool_geometry(x, kernel, stride, padding)
    xp = _pad(x, *spec.padding, value=-np.inf)
    kh, kw = spec.kernel
    out = np.full((x.shape[0], x.shape[1], ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros(out.shape, dtype=np.int32)
    for t in range(kh * kw):
        rs, cs = _tap_slices(t // kw, t % kw, spec, ho, wo)
        tap = xp[:, :, rs, cs]
        better = tap > out
        out = np.where(better, tap, out)
        arg[better] = t
    return out, arg


def max_pool2d_backward(x_shape, argmax: np.ndarray, grad_out: np.ndarray, kernel, stride, padding=0):
    n, c, h, w = x_shape
    spec = ConvSpec(c, c, kernel, stride, padding, groups=c)
    ho, wo = grad_out.shape[2:]
    ph, pw = spec.padding
    kh, kw = spec.kernel
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    for t in range(kh * kw):
        rs, cs = _tap_slices(t // kw, t % kw, spec, ho, wo)
        gxp[:, :, rs, cs] += np.where(argmax == t, grad_out, 0)
    return np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w])


def avg_pool2d(x: np.ndarray, kernel, stride, padding=0) -> np.ndarray:
    """Mean pooling; zero padding counts toward the divisor."""
    spec, ho, wo = _pool_geometry(x, kernel, stride, padding)
    xp = _pad(x, *spec.padding)
    kh, kw = spec.kernel
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _tap_slices(i, j, spec, ho, wo)
            out += xp[:, :, rs, cs]
    return out / (kh * kw)


def avg_pool2d_backward(x_shape, grad_out: np.ndarray, kernel, stride, padding=0) -> np.ndarray:
    n, c, h, w = x_shape
    spec = ConvSpec(c, c, kernel, stride, padding, groups=c)
    ho, wo = grad_out.shape[2:]
    ph, pw = spec.padding
    kh, kw = spec.kernel
    share = grad_out / (kh * kw)
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _tap_slices(i, j, spec, ho, wo)
            gxp[:, :, rs, cs] += share
    return np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w])


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )


def batch_norm_forward(x: np.ndarray, state: BatchNormState):
    """Return ``(output, new_state, cache)``.

    In train mode the batch statistics over ``(n, h, w)`` normalize the input
    and ``new_state`` carries the momentum-updated running statistics
    (``running = momentum * running + (1 - momentum) * batch``).
    """
    n, c, h, w = check_tensor(x)
    for name in ("gamma", "beta", "running_mean", "running_var"):
        if getattr(state, name).shape != (c,):
            raise ShapeError(f"batch norm {name} length {getattr(state, name).shape} != {c} channels")
    if state.mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        new_state = dataclasses.replace(
            state,
            running_mean=(m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype),
            running_var=(m * state.running_var + (1 - m) * var).astype(state.running_var.dtype),
        )
    elif state.mode == "inference":
        mean, var = state.running_mean, state.running_var
        new_state = state
    else:
        raise ConfigError(f"unknown batch norm mode {state.mode!r}")
    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * state.gamma[None, :, None, None] + state.beta[None, :, None, None]
    return out, new_state, (xhat, inv_std, state.mode)


def batch_norm_backward(grad_out: np.ndarray, gamma: np.ndarray, cache):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, mode = cache
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"grad_output shape {grad_out.shape} != {xhat.shape}")
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma[None, :, None, None]
    if mode == "inference":
        return dxhat * inv_std[None, :, None, None], grad_gamma, grad_beta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    grad_x = (inv_std / m)[None, :, None, None] * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return grad_x, grad_gamma, grad_beta


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    check_tensor(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_channels(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def bilinear_taps(k: int) -> np.ndarray:
    """1-D bilinear interpolation taps for a kernel of size ``k``."""
    factor = (k + 1) // 2
    center = factor - 1 if k % 2 == 1 else factor - 0.5
    return 1.0 - np.abs(np.arange(k) - center) / factor


def make_bilinear_kernel(k: int, channels: int, dtype=np.float32) -> ConvWeights:
    """Per-channel bilinear upsampling kernels for a ``channels -> channels`` transposed conv."""
    if k < 1 or channels < 1:
        raise ConfigError(f"invalid bilinear kernel request k={k}, channels={channels}")
    taps = bilinear_taps(k)
    filt = np.outer(taps, taps)
    kernels = np.zeros((channels, channels, k, k), dtype=dtype)
    idx = np.arange(channels)
    kernels[idx, idx] = filt
    return ConvWeights(kernels)


def he_init(spec: ConvSpec, seed, transposed: bool = False, dtype=np.float32) -> ConvWeights:
    """Gaussian kernels with std ``sqrt(2 / fan_in)``, ``fan_in = kh * kw * in/g``; zero bias."""
    kh, kw = spec.kernel
    fan_in = kh * kw * (spec.in_channels // spec.groups)
    rng = np.random.default_rng(seed)
    shape = spec.kernel_shape(transposed)
    kernels = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
    bias = np.zeros(spec.out_channels, dtype) if spec.has_bias else None
    return ConvWeights(kernels, bias)
