"""Numba-compiled convolution kernels.

Each output element is accumulated by exactly one thread with a fixed
inner-loop order, so results are bit-reproducible run to run (fastmath
stays off for the same reason).
"""

import numpy as np
from numba import config as _numba_config
from numba import njit, prange

# skip the TBB/OpenMP probe; the portable layer behaves identically here
_numba_config.THREADING_LAYER = "workqueue"

_JIT = {"cache": True, "parallel": True, "fastmath": False}


def _pad1(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    return xp


@njit(**_JIT)
def _conv3x3(xp, w, b, out):
    n_, co_, h, wd = out.shape
    ci_ = w.shape[1]
    for idx in prange(n_ * co_):
        n = idx // co_
        co = idx % co_
        for y in range(h):
            for x in range(wd):
                acc = b[co]
                for ci in range(ci_):
                    for kh in range(3):
                        for kw in range(3):
                            acc += xp[n, ci, y + kh, x + kw] * w[co, ci, kh, kw]
                out[n, co, y, x] = acc
    return out


@njit(**_JIT)
def _conv3x3_wgrad(dy, xp, dw):
    co_, ci_ = dw.shape[0], dw.shape[1]
    n_, _, h, wd = dy.shape
    for co in prange(co_):
        for ci in range(ci_):
            for kh in range(3):
                for kw in range(3):
                    acc = 0.0
                    for n in range(n_):
                        for y in range(h):
                            for x in range(wd):
                                acc += dy[n, co, y, x] * xp[n, ci, y + kh, x + kw]
                    dw[co, ci, kh, kw] = acc
    return dw


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    out = np.empty((n, w.shape[0], h, wd), dtype=x.dtype)
    return _conv3x3(_pad1(x), w, b, out)


def conv3x3_input_grad(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    n, _, h, wd = dy.shape
    out = np.empty((n, w_rot.shape[0], h, wd), dtype=dy.dtype)
    return _conv3x3(_pad1(dy), w_rot, np.zeros(w_rot.shape[0], dtype=dy.dtype), out)


def conv3x3_weight_grad(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    dw = np.empty((dy.shape[1], x.shape[1], 3, 3), dtype=dy.dtype)
    return _conv3x3_wgrad(np.ascontiguousarray(dy), _pad1(x), dw)
