"""Numba-compiled compute kernels.

Two kernel families live here:

* depthwise 3-D convolution forward/backward — the training hot path that
  vectorized numpy handles poorly (tap-loop register accumulation instead);
* the benchmark pair: a direct (bounds-checked, no padded copy) float32
  convolution and the bit-packed XNOR-popcount convolution it is measured
  against.

All kernels are single-pass and write each output element exactly once (or
accumulate single-threaded), so results are bit-stable across runs.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)


@njit(inline="always")
def _popcount64(v):
    # SWAR popcount; LLVM lowers this to a single POPCNT where available.
    v = v - ((v >> _S1) & _M1)
    v = (v & _M2) + ((v >> _S2) & _M2)
    v = (v + (v >> _S4)) & _M4
    return (v * _H01) >> _S56


@njit(cache=True)
def depthwise3d_forward(xp, w, sd, sh, sw, y):
    """Depthwise conv on a pre-padded input.

    xp: (N, C, Dp, Hp, Wp), w: (C, m, n, p), y: (N, C, Do, Ho, Wo) preallocated.
    """
    N, C = xp.shape[0], xp.shape[1]
    m, n, p = w.shape[1], w.shape[2], w.shape[3]
    Do, Ho, Wo = y.shape[2], y.shape[3], y.shape[4]
    for nn in range(N):
        for ch in range(C):
            for od in range(Do):
                i0 = od * sd
                for oh in range(Ho):
                    j0 = oh * sh
                    for ow in range(Wo):
                        k0 = ow * sw
                        acc = xp[nn, ch, 0, 0, 0] * 0
                        for a in range(m):
                            for b in range(n):
                                row = xp[nn, ch, i0 + a, j0 + b]
                                for c in range(p):
                                    acc += w[ch, a, b, c] * row[k0 + c]
                        y[nn, ch, od, oh, ow] = acc


@njit(cache=True)
def depthwise3d_backward(xp, w, gy, sd, sh, sw, gxp, gw):
    """Accumulate grad wrt the padded input and the depthwise weight in one pass."""
    N, C = xp.shape[0], xp.shape[1]
    m, n, p = w.shape[1], w.shape[2], w.shape[3]
    Do, Ho, Wo = gy.shape[2], gy.shape[3], gy.shape[4]
    for nn in range(N):
        for ch in range(C):
            for od in range(Do):
                i0 = od * sd
                for oh in range(Ho):
                    j0 = oh * sh
                    for ow in range(Wo):
                        k0 = ow * sw
                        g = gy[nn, ch, od, oh, ow]
                        for a in range(m):
                            for b in range(n):
                                for c in range(p):
                                    gxp[nn, ch, i0 + a, j0 + b, k0 + c] += g * w[ch, a, b, c]
                                    gw[ch, a, b, c] += g * xp[nn, ch, i0 + a, j0 + b, k0 + c]


@njit(cache=True)
def conv3d_direct(x, w, sd, sh, sw, pd, ph, pw, groups, y):
    """Direct-loop grouped 3-D convolution; zero padding via bounds checks.

    No padded copy is materialized — this is the reference 32-bit kernel the
    packed binary kernel is benchmarked against.
    """
    N, Ci, D, H, W = x.shape
    Co, Cig, m, n, p = w.shape
    Do, Ho, Wo = y.shape[2], y.shape[3], y.shape[4]
    Cog = Co // groups
    for nn in range(N):
        for co in range(Co):
            cibase = (co // Cog) * Cig
            for od in range(Do):
                id0 = od * sd - pd
                for oh in range(Ho):
                    ih0 = oh * sh - ph
                    for ow in range(Wo):
                        iw0 = ow * sw - pw
                        acc = x[nn, 0, 0, 0, 0] * 0
                        for a in range(m):
                            idd = id0 + a
                            if idd < 0 or idd >= D:
                                continue
                            for b in range(n):
                                ihh = ih0 + b
                                if ihh < 0 or ihh >= H:
                                    continue
                                for ci in range(Cig):
                                    for c in range(p):
                                        iww = iw0 + c
                                        if iww < 0 or iww >= W:
                                            continue
                                        acc += w[co, ci, a, b, c] * x[nn, cibase + ci, idd, ihh, iww]
                        y[nn, co, od, oh, ow] = acc


@njit(cache=True)
def xnor_conv3d_popcount(ax, wx, cig, sd, sh, sw, pd, ph, pw, acc):
    """XNOR-popcount convolution over channel-bit-packed operands.

    ax: (N, groups, D, H, W, nwords) uint64 activations, bit 1 == +1;
    wx: (Co, m, n, p, nwords) uint64 weights; tail bits are zero in both.
    acc: (N, Co, Do, Ho, Wo) int32 output — the raw +-1 dot product per window.

    Out-of-bounds taps are skipped: a padded position contributes nothing,
    matching zero padding of the +-1 float32 reference exactly.
    """
    N, g, D, H, W, nw = ax.shape
    Co = wx.shape[0]
    m, n, p = wx.shape[1], wx.shape[2], wx.shape[3]
    Do, Ho, Wo = acc.shape[2], acc.shape[3], acc.shape[4]
    Cog = Co // g
    if (m == 1 and n == 1 and p == 1 and sd == 1 and sh == 1 and sw == 1
            and pd == 0 and ph == 0 and pw == 0 and nw == 1):
        # 1x1x1 stride-1 fast path: one weight word per output channel,
        # tight xor+popcount sweep over positions
        s_total = D * H * W
        axf = ax.reshape(N, g, s_total)
        accf = acc.reshape(N, Co, s_total)
        for nn in range(N):
            for co in range(Co):
                wword = wx[co, 0, 0, 0, 0]
                arow = axf[nn, co // Cog]
                orow = accf[nn, co]
                for s in range(s_total):
                    orow[s] = np.int32(cig - 2 * np.int64(_popcount64(arow[s] ^ wword)))
        return
    for nn in range(N):
        for co in range(Co):
            gg = co // Cog
            for od in range(Do):
                id0 = od * sd - pd
                for oh in range(Ho):
                    ih0 = oh * sh - ph
                    for ow in range(Wo):
                        iw0 = ow * sw - pw
                        dis = 0
                        taps = 0
                        for a in range(m):
                            idd = id0 + a
                            if idd < 0 or idd >= D:
                                continue
                            for b in range(n):
                                ihh = ih0 + b
                                if ihh < 0 or ihh >= H:
                                    continue
                                for c in range(p):
                                    iww = iw0 + c
                                    if iww < 0 or iww >= W:
                                        continue
                                    taps += 1
                                    for wi in range(nw):
                                        x = ax[nn, gg, idd, ihh, iww, wi] ^ wx[co, a, b, c, wi]
                                        dis += np.int64(_popcount64(x))
                        # agreements - disagreements over cig valid bits per tap
                        acc[nn, co, od, oh, ow] = np.int32(taps * cig - 2 * dis)
