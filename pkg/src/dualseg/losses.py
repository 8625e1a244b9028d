"""Overlap loss for training and its composite over the two branches.

The loss on one raster is

    L = 1 - (sum(p*t) + eps) / (sum(p^q) + sum(t^q) - sum(p*t) + eps)

with exponent q >= 1 applied to both terms of the denominator. It is zero
exactly when the prediction reproduces a binary target, and approaches one
for disjoint supports.
"""

from dataclasses import dataclass

import numpy as np

from dualseg.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    power: float = 2.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.power < 1.0:
            raise ConfigError(f"loss power must be >= 1, got {self.power}")
        if self.epsilon <= 0.0:
            raise ConfigError(f"loss epsilon must be positive, got {self.epsilon}")


def _validate(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if not np.isfinite(pred).all():
        raise ShapeError("prediction contains non-finite values")
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise ShapeError("prediction values must lie in [0, 1]")
    if not np.isin(target, (0.0, 1.0)).all():
        raise ShapeError("target must be binary")
    return pred, target


def power_jaccard_loss(pred: np.ndarray, target: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    """Loss over all pixels of one raster; differentiable in pred."""
    pred, target = _validate(pred, target)
    inter = float((pred * target).sum())
    denom = float((pred**cfg.power).sum() + (target**cfg.power).sum() - inter)
    return 1.0 - (inter + cfg.epsilon) / (denom + cfg.epsilon)


def power_jaccard_grad(pred: np.ndarray, target: np.ndarray, cfg: LossConfig = LossConfig()):
    """Returns (loss, dloss/dpred) for one raster."""
    pred, target = _validate(pred, target)
    q = cfg.power
    inter = (pred * target).sum()
    denom = (pred**q).sum() + (target**q).sum() - inter
    num_e = inter + cfg.epsilon
    den_e = denom + cfg.epsilon
    # d inter/dp = t ; d denom/dp = q p^(q-1) - t
    grad = -(target * den_e - num_e * (q * pred ** (q - 1.0) - target)) / den_e**2
    return 1.0 - num_e / den_e, grad


def composite_loss(y: np.ndarray, p_sar: np.ndarray, p_opt: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    """Sum of the two per-branch losses against the same label raster."""
    return power_jaccard_loss(p_sar, y, cfg) + power_jaccard_loss(p_opt, y, cfg)


def composite_grad(y: np.ndarray, p_sar: np.ndarray, p_opt: np.ndarray, cfg: LossConfig = LossConfig()):
    """Returns (loss, dloss/dp_sar, dloss/dp_opt); each gradient comes from
    its own branch term only."""
    loss_s, grad_s = power_jaccard_grad(p_sar, y, cfg)
    loss_o, grad_o = power_jaccard_grad(p_opt, y, cfg)
    return loss_s + loss_o, grad_s, grad_o


def batch_power_jaccard_grad(pred: np.ndarray, target: np.ndarray, cfg: LossConfig):
    """Vectorized per-sample loss and gradient for [N, 1, H, W] batches."""
    q = cfg.power
    axes = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(axis=axes)
    denom = (pred**q).sum(axis=axes) + (target**q).sum(axis=axes) - inter
    num_e = inter + cfg.epsilon
    den_e = denom + cfg.epsilon
    shape = (-1,) + (1,) * (pred.ndim - 1)
    ne = num_e.reshape(shape)
    de = den_e.reshape(shape)
    grad = -(target * de - ne * (q * pred ** (q - 1.0) - target)) / de**2
    return 1.0 - num_e / den_e, grad
