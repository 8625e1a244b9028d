"""Pure-numpy convolution kernels (im2col / tensordot formulation).

Fallback path for machines without a working numba install; also the
reference the numba kernels are benchmarked against.
"""

import numpy as np


def _pad1(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    return xp


def _windows(xp: np.ndarray) -> np.ndarray:
    # [N, C, H, W, 3, 3] sliding views over the padded input
    return np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-size 3x3 convolution: [N,Ci,H,W] * [Co,Ci,3,3] + [Co] -> [N,Co,H,W]."""
    win = _windows(_pad1(x))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,Co
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += b[None, :, None, None]
    return out


def conv3x3_input_grad(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the conv input: full correlation with the rotated kernel."""
    w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zeros = np.zeros(w_rot.shape[0], dtype=dy.dtype)
    return conv3x3_forward(dy, w_rot, zeros)


def conv3x3_weight_grad(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the kernel: correlate upstream grad with input windows."""
    win = _windows(_pad1(x))  # N,Ci,H,W,3,3
    return np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # Co,Ci,3,3
