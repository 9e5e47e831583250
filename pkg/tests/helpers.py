"""Shared test utilities: finite-difference oracles and a brute-force conv."""

from __future__ import annotations

import numpy as np

FD_H = 1e-3
FD_RTOL = 1e-3
FD_FLOOR = 1e-6


def numeric_grad(f, x: np.ndarray, h: float = FD_H) -> np.ndarray:
    """Central finite differences of scalar f() wrt every coordinate of x (in place)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def numeric_grad_at(f, x: np.ndarray, flat_indices, h: float = FD_H) -> np.ndarray:
    """Central differences at selected flat coordinates only."""
    flat = x.reshape(-1)
    out = np.zeros(len(flat_indices), dtype=np.float64)
    for j, i in enumerate(flat_indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * h)
    return out


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, what: str = "",
                      rtol: float = FD_RTOL, floor: float = FD_FLOOR) -> None:
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.size == 0:
        return
    err = np.abs(analytic - numeric)
    bound = rtol * np.abs(numeric) + floor
    worst = np.max(err - bound)
    assert np.all(err <= bound), (
        f"gradient mismatch{f' ({what})' if what else ''}: worst excess {worst:.3e}, "
        f"max abs err {err.max():.3e}"
    )


def conv3d_naive(x: np.ndarray, w: np.ndarray, stride, padding, groups: int) -> np.ndarray:
    """Straight 7-loop reference convolution (zero padding), float64 accumulation."""
    n_, ci, d, h, wd = x.shape
    co, cig, m, n, p = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    do = (d + 2 * pd - m) // sd + 1
    ho = (h + 2 * ph - n) // sh + 1
    wo = (wd + 2 * pw - p) // sw + 1
    cog = co // groups
    y = np.zeros((n_, co, do, ho, wo), dtype=np.float64)
    for nn in range(n_):
        for oc in range(co):
            cibase = (oc // cog) * cig
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for ic in range(cig):
                            for a in range(m):
                                id_ = od * sd + a - pd
                                if not 0 <= id_ < d:
                                    continue
                                for b in range(n):
                                    ih = oh * sh + b - ph
                                    if not 0 <= ih < h:
                                        continue
                                    for c in range(p):
                                        iw = ow * sw + c - pw
                                        if not 0 <= iw < wd:
                                            continue
                                        acc += w[oc, ic, a, b, c] * x[nn, cibase + ic, id_, ih, iw]
                        y[nn, oc, od, oh, ow] = acc
    return y
