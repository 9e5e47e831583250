"""Binarization machinery: sign, scaling factors, channel bit-packing, XNOR conv.

Packing convention: the channel axis is packed LSB-first into 64-bit words,
bit 1 encoding +1 and bit 0 encoding -1; unused tail bits are zero. Grouped
convolutions pack each group's channels into separate words so XNOR windows
never mix groups. At image borders out-of-bounds taps are skipped entirely
(a zero-padded position contributes 0 to the +-1 dot product either way, so
the packed kernel agrees exactly with a zero-padded float reference).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .ops import Conv3dSpec, conv3d_backward, conv3d_forward

WORD_BITS = 64


def sign_binarize(x: np.ndarray) -> np.ndarray:
    """+1 where x >= 0, -1 where x < 0 (exact zero maps to +1)."""
    return np.where(x >= 0, x.dtype.type(1), x.dtype.type(-1))


@dataclass(frozen=True)
class ChannelScales:
    """Per-output-channel positive scale factors applied after the binary conv."""

    alpha: np.ndarray

    def __post_init__(self):
        if self.alpha.ndim != 1:
            raise ValueError(f"alpha must be 1-D, got shape {tuple(self.alpha.shape)}")
        if np.any(self.alpha <= 0):
            raise ValueError("all channel scales must be > 0")


def channel_scales(weight: np.ndarray) -> ChannelScales:
    """alpha[i] = mean |w| over output channel i (L1 norm / per-channel element count)."""
    flat = np.abs(weight.reshape(weight.shape[0], -1))
    alpha = flat.mean(axis=1, dtype=np.float64)
    if np.any(alpha == 0):
        dead = np.flatnonzero(alpha == 0)
        raise ValueError(f"scale undefined: all-zero weight channel(s) {dead.tolist()}")
    return ChannelScales(alpha.astype(np.float32))


def global_scale(weight: np.ndarray) -> float:
    """Single scalar mean |w| over the whole tensor (ablation baseline)."""
    a = float(np.abs(weight).mean(dtype=np.float64))
    if a == 0:
        raise ValueError("scale undefined: weight tensor is all zero")
    return a


# ---------------------------------------------------------------------------
# Bit packing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PackedTensor:
    """Channel-bit-packed +-1 tensor; words live on the trailing axis.

    role 'activation': logical (N, C, D, H, W), words (N, groups, D, H, W, nw).
    role 'weight':     logical (Co, Cig, m, n, p), words (Co, m, n, p, nw).
    """

    words: np.ndarray
    logical_shape: tuple[int, ...]
    groups: int
    role: str

    @property
    def channels_per_group(self) -> int:
        if self.role == "activation":
            return self.logical_shape[1] // self.groups
        return self.logical_shape[1]

    @property
    def word_count(self) -> int:
        return -(-self.channels_per_group // WORD_BITS)

    @property
    def valid_bits_last_word(self) -> int:
        return self.channels_per_group - WORD_BITS * (self.word_count - 1)


def _check_pm1(x: np.ndarray) -> None:
    if not np.all(np.abs(x) == 1):
        raise ValueError("packing requires values in {-1, +1}; binarize first")


def _pack_last_axis(bits: np.ndarray) -> np.ndarray:
    """Pack a trailing bit axis (uint8 0/1) into uint64 words, LSB-first."""
    c = bits.shape[-1]
    nw = -(-c // WORD_BITS)
    pad = nw * WORD_BITS - c
    if pad:
        bits = np.concatenate([bits, np.zeros((*bits.shape[:-1], pad), dtype=np.uint8)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def _unpack_last_axis(words: np.ndarray, c: int) -> np.ndarray:
    bytes_ = np.ascontiguousarray(words.astype("<u8", copy=False)).view(np.uint8)
    bits = np.unpackbits(bytes_, axis=-1, bitorder="little")
    return bits[..., :c]


def pack_channels(x: np.ndarray, groups: int = 1) -> PackedTensor:
    """Pack a +-1 activation tensor (N, C, D, H, W) along the channel axis."""
    _check_pm1(x)
    n, c, d, h, w = x.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    cig = c // groups
    if cig == 1:
        # depthwise layout: one valid bit per word, no packbits pass needed
        words = (x > 0).reshape(n, groups, d, h, w, 1).astype(np.uint64)
        return PackedTensor(words, tuple(x.shape), groups, "activation")
    bits = (x > 0).reshape(n, groups, cig, d, h, w)
    bits = np.ascontiguousarray(bits.transpose(0, 1, 3, 4, 5, 2), dtype=np.uint8)
    return PackedTensor(_pack_last_axis(bits), tuple(x.shape), groups, "activation")


def pack_weight(w: np.ndarray) -> PackedTensor:
    """Pack a +-1 weight tensor (Co, Cig, m, n, p) along the per-group input axis."""
    _check_pm1(w)
    bits = np.ascontiguousarray((w > 0).transpose(0, 2, 3, 4, 1), dtype=np.uint8)
    return PackedTensor(_pack_last_axis(bits), tuple(w.shape), 1, "weight")


def unpack(p: PackedTensor) -> np.ndarray:
    """Inverse of packing: the +-1 float32 tensor."""
    if p.role == "activation":
        n, c, d, h, w = p.logical_shape
        cig = p.channels_per_group
        bits = _unpack_last_axis(np.ascontiguousarray(p.words), cig)
        bits = bits.transpose(0, 1, 5, 2, 3, 4).reshape(n, c, d, h, w)
    else:
        bits = _unpack_last_axis(np.ascontiguousarray(p.words), p.logical_shape[1])
        bits = bits.transpose(0, 4, 1, 2, 3)
    return np.where(bits > 0, np.float32(1), np.float32(-1))


# ---------------------------------------------------------------------------
# XNOR-popcount convolution
# ---------------------------------------------------------------------------

def xnor_conv3d_int(a: PackedTensor, w: PackedTensor, spec: Conv3dSpec) -> np.ndarray:
    """Raw integer +-1 dot products per window (pre-scale), int32."""
    if a.role != "activation" or w.role != "weight":
        raise ValueError("xnor_conv3d expects (activation, weight) packed operands")
    if a.logical_shape[1] != spec.in_channels or a.groups != spec.groups:
        raise ValueError(
            f"packed input channels/groups {a.logical_shape[1]}/{a.groups} do not match "
            f"spec {spec.in_channels}/{spec.groups}"
        )
    if w.logical_shape != spec.weight_shape:
        raise ValueError(f"packed weight {w.logical_shape} does not match spec {spec.weight_shape}")
    out_sp = spec.out_spatial(a.logical_shape[2:])
    acc = np.empty((a.logical_shape[0], spec.out_channels, *out_sp), dtype=np.int32)
    kernels.xnor_conv3d_popcount(
        a.words, w.words, a.channels_per_group, *spec.stride, *spec.padding, acc
    )
    return acc


def xnor_conv3d(
    a: PackedTensor, w: PackedTensor, scales: ChannelScales, spec: Conv3dSpec
) -> np.ndarray:
    """Scaled binary convolution: float32(int accumulation) * alpha[out_channel]."""
    if scales.alpha.shape[0] != spec.out_channels:
        raise ValueError(
            f"scales cover {scales.alpha.shape[0]} channels, spec has {spec.out_channels}"
        )
    acc = xnor_conv3d_int(a, w, spec)
    return acc.astype(np.float32) * scales.alpha.reshape(1, -1, 1, 1, 1)


# ---------------------------------------------------------------------------
# Gradient estimators for sign
# ---------------------------------------------------------------------------

def approx_sign(x: np.ndarray) -> np.ndarray:
    """Piecewise-polynomial surrogate of sign: -1 | 2x+x^2 | 2x-x^2 | 1."""
    y = np.where(x < 0, 2 * x + x * x, 2 * x - x * x)
    y = np.where(x < -1, -1.0, y)
    y = np.where(x >= 1, 1.0, y)
    return y.astype(x.dtype)


def approx_sign_backward(grad_out: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    """grad * g(x) with g(x) = 2+2x on [-1,0), 2-2x on [0,1), 0 elsewhere."""
    g = np.maximum(0, 2 - 2 * np.abs(pre_activation))
    return grad_out * g.astype(grad_out.dtype)


def ste_weight_grad(grad_wb: np.ndarray, latent: np.ndarray) -> np.ndarray:
    """Straight-through weight gradient: identity inside [-1, 1], clipped outside."""
    return grad_wb * (np.abs(latent) <= 1)


def clamp_latent(latent: np.ndarray) -> np.ndarray:
    return np.clip(latent, -1, 1)


# ---------------------------------------------------------------------------
# Binary convolution as used by layers (float +-1 path; values identical to
# the packed path, which is reserved for inference/bench execution)
# ---------------------------------------------------------------------------

def binary_conv_forward(
    x_signed: np.ndarray, latent: np.ndarray, spec: Conv3dSpec, channel_wise: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (y, wb, alpha). y = conv(x_signed, sign(latent)) * alpha."""
    wb = sign_binarize(latent)
    if channel_wise:
        alpha = channel_scales(latent).alpha
    else:
        alpha = np.full(spec.out_channels, global_scale(latent), dtype=np.float32)
    y = conv3d_forward(x_signed, wb, spec) * alpha.astype(x_signed.dtype).reshape(1, -1, 1, 1, 1)
    return y, wb, alpha


def binary_conv_backward(
    grad_out: np.ndarray,
    x_signed: np.ndarray,
    wb: np.ndarray,
    alpha: np.ndarray,
    latent: np.ndarray,
    spec: Conv3dSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients wrt the signed input and the latent weight (STE through sign)."""
    g_conv = grad_out * alpha.astype(grad_out.dtype).reshape(1, -1, 1, 1, 1)
    gx, gwb = conv3d_backward(g_conv, x_signed, wb, spec)
    return gx, ste_weight_grad(gwb, latent)
