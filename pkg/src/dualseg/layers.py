"""Differentiable layer primitives on [N, C, H, W] float64 arrays.

The 3x3 convolutions dispatch to the selected kernel backend; everything
else is cheap enough to stay in plain numpy. Backward functions return
gradients in the same layout as their inputs.
"""

import numpy as np

from dualseg import kernels


def conv3x3(x, w, b):
    return kernels.conv3x3_forward(x, w, b)


def conv3x3_backward(dy, x, w):
    """Returns (dx, dw, db) for a same-size 3x3 convolution."""
    dx = kernels.conv3x3_input_grad(dy, w)
    dw = kernels.conv3x3_weight_grad(dy, x)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def conv1x1(x, w, b):
    """Pointwise convolution: [N,Ci,H,W] * [Co,Ci] + [Co]."""
    out = np.einsum("nchw,oc->nohw", x, w)
    out += b[None, :, None, None]
    return out


def conv1x1_backward(dy, x, w):
    dx = np.einsum("nohw,oc->nchw", dy, w)
    dw = np.einsum("nohw,nchw->oc", dy, x)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, out):
    # out is the relu output; positive iff the pre-activation was positive
    return dy * (out > 0.0)


def maxpool2(x):
    """2x2 max pooling with stride 2. Returns (pooled, argmax) where argmax
    indexes the winning cell (0..3, first occurrence on ties)."""
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    v = v.reshape(n, c, h // 2, w // 2, 4)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(dy, idx, in_shape):
    n, c, h, w = in_shape
    dv = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dv, idx[..., None], dy[..., None], axis=-1)
    dv = dv.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dv.reshape(n, c, h, w)


def upconv2(x, w, b):
    """2x2 stride-2 transposed convolution: [N,Ci,h,w] * [Ci,Co,2,2] -> [N,Co,2h,2w]."""
    n, _, h, wd = x.shape
    co = w.shape[1]
    out = np.einsum("ncij,cokl->noikjl", x, w).reshape(n, co, 2 * h, 2 * wd)
    out += b[None, :, None, None]
    return out


def upconv2_backward(dy, x, w):
    n, co, h2, w2 = dy.shape
    dy6 = dy.reshape(n, co, h2 // 2, 2, w2 // 2, 2)
    dx = np.einsum("noikjl,cokl->ncij", dy6, w)
    dw = np.einsum("ncij,noikjl->cokl", x, dy6)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def dense(x, w, b):
    """Fully connected: [N,Ci] @ [Co,Ci].T + [Co]."""
    return x @ w.T + b


def dense_backward(dy, x, w):
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dw, db


SIGMOID_CLIP = 1e-12


def sigmoid(x):
    """Numerically stable logistic, clipped into the open interval (0, 1)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, SIGMOID_CLIP, 1.0 - SIGMOID_CLIP)
