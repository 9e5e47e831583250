"""Forward and backward passes for every full-precision layer.

Convolution dispatches on structure: 1x1x1 kernels become channel matmuls,
depthwise kernels go to the compiled tap-loop, everything else runs as
im2col + GEMM. Backwards are hand-written analytic gradients; there is no
autodiff graph. Functions preserve the input dtype so gradient tests can run
the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 ints, got {v!r}")
    return t


@dataclass(frozen=True)
class Conv3dSpec:
    """Shape contract of a (possibly grouped) 3-D convolution; bias-free."""

    in_channels: int
    out_channels: int
    kernel: Triple
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ValueError(f"channels/groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must be divisible by groups={self.groups}"
            )
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ValueError(f"kernel and stride must be >= 1: {self}")
        if any(p < 0 for p in self.padding):
            raise ValueError(f"padding must be >= 0: {self}")

    @property
    def group_in(self) -> int:
        return self.in_channels // self.groups

    @property
    def group_out(self) -> int:
        return self.out_channels // self.groups

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (self.out_channels, self.group_in, *self.kernel)

    @property
    def param_count(self) -> int:
        return int(np.prod(self.weight_shape))

    def out_spatial(self, spatial: Triple) -> Triple:
        out = []
        for size, k, s, p in zip(spatial, self.kernel, self.stride, self.padding):
            o = (size + 2 * p - k) // s + 1
            if o < 1:
                raise ValueError(
                    f"degenerate output size {o} for input extent {size} with "
                    f"kernel {k}, stride {s}, padding {p}"
                )
            out.append(o)
        return tuple(out)

    @property
    def is_pointwise(self) -> bool:
        return self.kernel == (1, 1, 1) and self.padding == (0, 0, 0)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels and self.group_out == 1


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, spec: Conv3dSpec) -> Triple:
    if x.ndim != 5:
        raise ValueError(f"conv3d expects a 5-D input, got shape {tuple(x.shape)}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape:
        raise ValueError(f"weight shape {tuple(w.shape)} does not match spec {spec.weight_shape}")
    return spec.out_spatial(tuple(x.shape[2:]))


def _pad_input(x: np.ndarray, padding: Triple) -> np.ndarray:
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _im2col(xp: np.ndarray, spec: Conv3dSpec, out_sp: Triple) -> np.ndarray:
    """(N, Ci, Dp, Hp, Wp) -> (N, groups, Cig*m*n*p, S) patch matrix (copies)."""
    N = xp.shape[0]
    sd, sh, sw = spec.stride
    cols = sliding_window_view(xp, spec.kernel, axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    cols = cols.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return np.ascontiguousarray(cols).reshape(
        N, spec.groups, spec.group_in * int(np.prod(spec.kernel)), int(np.prod(out_sp))
    )


def conv3d_forward(x: np.ndarray, w: np.ndarray, spec: Conv3dSpec) -> np.ndarray:
    """y[n,co,i,j,k] = sum_{ci,a,b,c} w[co,ci,a,b,c] * x[n,g(ci),i*sd+a-pd,...], zero outside."""
    out_sp = _check_conv_shapes(x, w, spec)
    N = x.shape[0]
    g, cig, cog = spec.groups, spec.group_in, spec.group_out
    if spec.is_pointwise:
        sd, sh, sw = spec.stride
        xs = np.ascontiguousarray(x[:, :, ::sd, ::sh, ::sw])
        xs = xs.reshape(N, g, cig, -1)
        y = np.matmul(w.reshape(g, cog, cig), xs)
        return y.reshape(N, spec.out_channels, *out_sp)
    xp = _pad_input(x, spec.padding)
    if spec.is_depthwise:
        y = np.empty((N, spec.out_channels, *out_sp), dtype=x.dtype)
        kernels.depthwise3d_forward(xp, np.ascontiguousarray(w[:, 0]), *spec.stride, y)
        return y
    cols = _im2col(xp, spec, out_sp)
    y = np.matmul(w.reshape(g, cog, -1), cols)
    return y.reshape(N, spec.out_channels, *out_sp)


def conv3d_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, spec: Conv3dSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of conv3d_forward wrt input and weight."""
    out_sp = _check_conv_shapes(x, w, spec)
    if tuple(grad_out.shape) != (x.shape[0], spec.out_channels, *out_sp):
        raise ValueError(
            f"grad_out shape {tuple(grad_out.shape)} does not match forward output "
            f"{(x.shape[0], spec.out_channels, *out_sp)}"
        )
    N = x.shape[0]
    g, cig, cog = spec.groups, spec.group_in, spec.group_out
    sd, sh, sw = spec.stride
    gy = grad_out.reshape(N, g, cog, -1)

    if spec.is_pointwise:
        xs = np.ascontiguousarray(x[:, :, ::sd, ::sh, ::sw]).reshape(N, g, cig, -1)
        gw = np.einsum("ngos,ngis->goi", gy, xs, optimize=True).reshape(w.shape)
        gxs = np.matmul(w.reshape(g, cog, cig).transpose(0, 2, 1), gy)
        gx = np.zeros_like(x)
        gx[:, :, ::sd, ::sh, ::sw] = gxs.reshape(N, spec.in_channels, *out_sp)
        return gx, gw

    xp = _pad_input(x, spec.padding)
    pd, ph, pw = spec.padding

    if spec.is_depthwise:
        gxp = np.zeros_like(xp)
        gw0 = np.zeros((spec.out_channels, *spec.kernel), dtype=x.dtype)
        kernels.depthwise3d_backward(
            xp, np.ascontiguousarray(w[:, 0]), np.ascontiguousarray(grad_out), sd, sh, sw, gxp, gw0
        )
        gx = gxp[:, :, pd : pd + x.shape[2], ph : ph + x.shape[3], pw : pw + x.shape[4]]
        return np.ascontiguousarray(gx), gw0.reshape(w.shape)

    cols = _im2col(xp, spec, out_sp)
    gw = np.einsum("ngos,ngks->gok", gy, cols, optimize=True).reshape(w.shape)
    gxp = np.zeros_like(xp)
    wg = w.reshape(g, cog, cig, *spec.kernel)
    gy5 = grad_out.reshape(N, g, cog, -1)
    Do, Ho, Wo = out_sp
    for a in range(spec.kernel[0]):
        for b in range(spec.kernel[1]):
            for c in range(spec.kernel[2]):
                contrib = np.matmul(wg[:, :, :, a, b, c].transpose(0, 2, 1), gy5)
                gxp[:, :, a : a + sd * Do : sd, b : b + sh * Ho : sh, c : c + sw * Wo : sw] += (
                    contrib.reshape(N, spec.in_channels, Do, Ho, Wo)
                )
    gx = gxp[:, :, pd : pd + x.shape[2], ph : ph + x.shape[3], pw : pw + x.shape[4]]
    return np.ascontiguousarray(gx), gw


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNorm3dState:
    """Learnable scale/shift plus running statistics for one channel axis."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNorm3dState":
        return cls(
            gamma=np.ones(channels, dtype=np.float32),
            beta=np.zeros(channels, dtype=np.float32),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def bn_forward(x: np.ndarray, state: BatchNorm3dState, mode: str) -> tuple[np.ndarray, dict]:
    """Normalize over (N, D, H, W) per channel. Train mode updates running stats."""
    if x.ndim != 5 or x.shape[1] != state.channels:
        raise ValueError(f"batchnorm expects (N,{state.channels},D,H,W), got {tuple(x.shape)}")
    axes = (0, 2, 3, 4)
    cshape = (1, state.channels, 1, 1, 1)
    if mode == "train":
        mu = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        count = x.size // state.channels
        unbiased = var * (count / max(count - 1, 1))
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(np.float32)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(np.float32)
    elif mode == "eval":
        mu = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    rstd = 1.0 / np.sqrt(var + state.eps)
    mu = mu.astype(x.dtype)
    rstd = rstd.astype(x.dtype)
    xhat = (x - mu.reshape(cshape)) * rstd.reshape(cshape)
    y = state.gamma.astype(x.dtype).reshape(cshape) * xhat + state.beta.astype(x.dtype).reshape(cshape)
    return y, {"xhat": xhat, "rstd": rstd, "mode": mode}


def batchnorm3d(x: np.ndarray, state: BatchNorm3dState, mode: str) -> np.ndarray:
    return bn_forward(x, state, mode)[0]


def bn_backward(
    grad_out: np.ndarray, cache: dict, state: BatchNorm3dState
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, rstd, mode = cache["xhat"], cache["rstd"], cache["mode"]
    axes = (0, 2, 3, 4)
    cshape = (1, state.channels, 1, 1, 1)
    dgamma = np.sum(grad_out * xhat, axis=axes)
    dbeta = np.sum(grad_out, axis=axes)
    gamma = state.gamma.astype(grad_out.dtype).reshape(cshape)
    if mode == "eval":
        gx = grad_out * gamma * rstd.reshape(cshape)
        return gx, dgamma, dbeta
    dxhat = grad_out * gamma
    m1 = dxhat.mean(axis=axes).reshape(cshape)
    m2 = (dxhat * xhat).mean(axis=axes).reshape(cshape)
    gx = rstd.reshape(cshape) * (dxhat - m1 - xhat * m2)
    return gx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Simple layers
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def avgpool3d(x: np.ndarray, kernel, stride=None) -> np.ndarray:
    """Average pooling, no padding; windows that do not fit are dropped."""
    k = _triple(kernel)
    s = _triple(stride) if stride is not None else k
    out_sp = tuple((x.shape[2 + i] - k[i]) // s[i] + 1 for i in range(3))
    if any(o < 1 for o in out_sp):
        raise ValueError(f"avgpool window {k} does not fit input {tuple(x.shape[2:])}")
    y = np.zeros((x.shape[0], x.shape[1], *out_sp), dtype=x.dtype)
    Do, Ho, Wo = out_sp
    for a in range(k[0]):
        for b in range(k[1]):
            for c in range(k[2]):
                y += x[:, :, a : a + s[0] * Do : s[0], b : b + s[1] * Ho : s[1], c : c + s[2] * Wo : s[2]]
    return y / x.dtype.type(k[0] * k[1] * k[2])


def avgpool3d_backward(grad_out: np.ndarray, x_shape, kernel, stride=None) -> np.ndarray:
    k = _triple(kernel)
    s = _triple(stride) if stride is not None else k
    gx = np.zeros(x_shape, dtype=grad_out.dtype)
    Do, Ho, Wo = grad_out.shape[2:]
    scaled = grad_out / grad_out.dtype.type(k[0] * k[1] * k[2])
    for a in range(k[0]):
        for b in range(k[1]):
            for c in range(k[2]):
                gx[:, :, a : a + s[0] * Do : s[0], b : b + s[1] * Ho : s[1], c : c + s[2] * Wo : s[2]] += scaled
    return gx


def global_avgpool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64).astype(x.dtype)


def global_avgpool_backward(grad_out: np.ndarray, x_shape) -> np.ndarray:
    count = x_shape[2] * x_shape[3] * x_shape[4]
    return np.broadcast_to(grad_out / count, x_shape).astype(grad_out.dtype, copy=True)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (N, F), w: (O, F), b: (O,)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {tuple(x.shape)} incompatible with weight {tuple(w.shape)}")
    return x @ w.T + b


def linear_backward(grad_out, x, w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def dropout(x: np.ndarray, rate: float, mode: str, rng) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: kept activations scale by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, None
    keep = (rng.uniform(x.shape) >= rate).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return x * keep * scale, keep * scale


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """y is the softmax output."""
    dot = (grad_out * y).sum(axis=-1, keepdims=True)
    return y * (grad_out - dot)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 0.0
    num_classes: int = 2

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"label smoothing epsilon must be in [0,1), got {self.epsilon}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")


def smooth_labels(labels: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Soft targets: true class gets (1-eps) + eps/K, the rest eps/K each."""
    n = labels.shape[0]
    k = cfg.num_classes
    t = np.full((n, k), cfg.epsilon / k, dtype=np.float64)
    t[np.arange(n), labels] += 1.0 - cfg.epsilon
    return t


def cross_entropy_smoothed(
    logits: np.ndarray, labels: np.ndarray, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    """Mean batch cross-entropy against smoothed targets; returns (loss, grad_logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != cfg.num_classes:
        raise ValueError(f"logits shape {tuple(logits.shape)} does not match K={cfg.num_classes}")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ValueError(f"labels must be in [0,{cfg.num_classes}), got range "
                         f"[{labels.min()},{labels.max()}]")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    targets = smooth_labels(labels, cfg)
    loss = float(-(targets * logp).sum(axis=1).mean())
    grad = ((np.exp(logp) - targets) / logits.shape[0]).astype(logits.dtype)
    return loss, grad
