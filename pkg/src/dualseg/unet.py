"""One uni-modal encoder-decoder branch with exposed fusion tap points.

Stages double their channel width; each stage is two 3x3 convolutions with
rectifier nonlinearities. Downsampling is 2x2 max pooling, decoding is a 2x2
transposed convolution followed by a skip concatenation and another double
convolution. Tap points sit on the (possibly recalibrated) encoder stage
outputs, so substituted features propagate through both the downstream
encoder and the skip connections.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dualseg import layers
from dualseg.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class UnetConfig:
    in_channels: int
    base_channels: int = 8
    depth: int = 4
    tap_points: tuple = (1, 2, 3, 4)

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("in_channels and base_channels must be positive")
        if self.depth < 2:
            raise ConfigError(f"depth must be at least 2, got {self.depth}")
        taps = tuple(self.tap_points)
        if len(set(taps)) != len(taps):
            raise ConfigError(f"tap_points must be distinct, got {taps}")
        for s in taps:
            if not 1 <= s <= self.depth:
                raise ConfigError(f"tap point {s} outside stages 1..{self.depth}")
        object.__setattr__(self, "tap_points", taps)

    def stage_channels(self) -> list:
        return [self.base_channels * 2 ** (s - 1) for s in range(1, self.depth + 1)]


@dataclass
class FeatureTap:
    stage: int
    feature: np.ndarray  # [C, h, w]


def init_unet_params(cfg: UnetConfig, rng: np.random.Generator, prefix: str) -> dict:
    """He-style initialization; biases start at zero."""
    params = {}

    def conv(name, ci, co):
        params[f"{prefix}.{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / (ci * 9)), size=(co, ci, 3, 3))
        params[f"{prefix}.{name}.b"] = np.zeros(co)

    widths = cfg.stage_channels()
    ci = cfg.in_channels
    for s, co in enumerate(widths, start=1):
        conv(f"enc{s}.conv1", ci, co)
        conv(f"enc{s}.conv2", co, co)
        ci = co
    for s in range(cfg.depth - 1, 0, -1):
        c_in, c_out = widths[s], widths[s - 1]
        params[f"{prefix}.dec{s}.up.w"] = rng.normal(
            0.0, np.sqrt(2.0 / (c_in * 4)), size=(c_in, c_out, 2, 2)
        )
        params[f"{prefix}.dec{s}.up.b"] = np.zeros(c_out)
        conv(f"dec{s}.conv1", 2 * c_out, c_out)
        conv(f"dec{s}.conv2", c_out, c_out)
    params[f"{prefix}.head.w"] = rng.normal(0.0, np.sqrt(1.0 / widths[0]), size=(1, widths[0]))
    params[f"{prefix}.head.b"] = np.zeros(1)
    return params


def check_input_size(cfg: UnetConfig, h: int, w: int):
    factor = 2 ** (cfg.depth - 1)
    if h % factor or w % factor:
        raise ShapeError(
            f"spatial size {h}x{w} not divisible by {factor} (depth {cfg.depth})"
        )


def encode_stage(params: dict, prefix: str, x: np.ndarray):
    """Double convolution; returns (feature, cache)."""
    a1 = layers.relu(layers.conv3x3(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"]))
    f = layers.relu(layers.conv3x3(a1, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"]))
    return f, {"x": x, "a1": a1, "f": f}


def encode_stage_backward(params: dict, prefix: str, df: np.ndarray, cache: dict, grads: dict):
    d2 = layers.relu_backward(df, cache["f"])
    dx2, dw2, db2 = layers.conv3x3_backward(d2, cache["a1"], params[f"{prefix}.conv2.w"])
    _accum(grads, f"{prefix}.conv2.w", dw2)
    _accum(grads, f"{prefix}.conv2.b", db2)
    d1 = layers.relu_backward(dx2, cache["a1"])
    dx, dw1, db1 = layers.conv3x3_backward(d1, cache["x"], params[f"{prefix}.conv1.w"])
    _accum(grads, f"{prefix}.conv1.w", dw1)
    _accum(grads, f"{prefix}.conv1.b", db1)
    return dx


def decode(params: dict, prefix: str, cfg: UnetConfig, feats: list):
    """Decoder over the (recalibrated) stage outputs; returns (logits, cache).

    feats[s-1] is the stage-s output; the last entry is the bottleneck.
    """
    widths = cfg.stage_channels()
    u = feats[-1]
    stage_caches = []
    for s in range(cfg.depth - 1, 0, -1):
        skip = feats[s - 1]
        up = layers.upconv2(u, params[f"{prefix}.dec{s}.up.w"], params[f"{prefix}.dec{s}.up.b"])
        cat = np.concatenate([skip, up], axis=1)
        a1 = layers.relu(
            layers.conv3x3(cat, params[f"{prefix}.dec{s}.conv1.w"], params[f"{prefix}.dec{s}.conv1.b"])
        )
        u_out = layers.relu(
            layers.conv3x3(a1, params[f"{prefix}.dec{s}.conv2.w"], params[f"{prefix}.dec{s}.conv2.b"])
        )
        stage_caches.append(
            {"s": s, "u_in": u, "cat": cat, "a1": a1, "u_out": u_out, "c_skip": widths[s - 1]}
        )
        u = u_out
    logits = layers.conv1x1(u, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"])
    return logits, {"stages": stage_caches, "head_in": u}


def decode_backward(params: dict, prefix: str, cfg: UnetConfig, dlogits: np.ndarray, cache: dict, grads: dict):
    """Returns dfeats, the gradient w.r.t. each stage output consumed by the decoder."""
    du, dw_h, db_h = layers.conv1x1_backward(dlogits, cache["head_in"], params[f"{prefix}.head.w"])
    _accum(grads, f"{prefix}.head.w", dw_h)
    _accum(grads, f"{prefix}.head.b", db_h)
    dfeats = [None] * cfg.depth
    for sc in reversed(cache["stages"]):
        s = sc["s"]
        d2 = layers.relu_backward(du, sc["u_out"])
        dcat1, dw2, db2 = layers.conv3x3_backward(d2, sc["a1"], params[f"{prefix}.dec{s}.conv2.w"])
        _accum(grads, f"{prefix}.dec{s}.conv2.w", dw2)
        _accum(grads, f"{prefix}.dec{s}.conv2.b", db2)
        d1 = layers.relu_backward(dcat1, sc["a1"])
        dcat, dw1, db1 = layers.conv3x3_backward(d1, sc["cat"], params[f"{prefix}.dec{s}.conv1.w"])
        _accum(grads, f"{prefix}.dec{s}.conv1.w", dw1)
        _accum(grads, f"{prefix}.dec{s}.conv1.b", db1)
        c_skip = sc["c_skip"]
        dfeats[s - 1] = dcat[:, :c_skip]
        dup = dcat[:, c_skip:]
        du, dw_up, db_up = layers.upconv2_backward(dup, sc["u_in"], params[f"{prefix}.dec{s}.up.w"])
        _accum(grads, f"{prefix}.dec{s}.up.w", dw_up)
        _accum(grads, f"{prefix}.dec{s}.up.b", db_up)
    dfeats[cfg.depth - 1] = du
    return dfeats


def forward_batch(params: dict, prefix: str, cfg: UnetConfig, x: np.ndarray, want_cache: bool = False):
    """Plain single-branch forward on a batch; returns (logits, feats[, cache])."""
    check_input_size(cfg, x.shape[2], x.shape[3])
    cur = x
    feats, enc_caches, pool_idx = [], [], []
    for s in range(1, cfg.depth + 1):
        f, c = encode_stage(params, f"{prefix}.enc{s}", cur)
        feats.append(f)
        enc_caches.append(c)
        if s < cfg.depth:
            cur, idx = layers.maxpool2(f)
            pool_idx.append(idx)
    logits, dec_cache = decode(params, prefix, cfg, feats)
    if not want_cache:
        return logits, feats
    return logits, feats, {"enc": enc_caches, "pool_idx": pool_idx, "dec": dec_cache}


def backward_batch(params: dict, prefix: str, cfg: UnetConfig, dlogits: np.ndarray, cache: dict, grads: dict):
    """Backprop for forward_batch; returns gradient w.r.t. the branch input."""
    dfeats = decode_backward(params, prefix, cfg, dlogits, cache["dec"], grads)
    dnext = None
    for s in range(cfg.depth, 0, -1):
        df = dfeats[s - 1]
        if s < cfg.depth:
            df = df + layers.maxpool2_backward(dnext, cache["pool_idx"][s - 1], cache["enc"][s - 1]["f"].shape)
        dnext = encode_stage_backward(params, f"{prefix}.enc{s}", df, cache["enc"][s - 1], grads)
    return dnext


def unet_forward(params: dict, cfg: UnetConfig, x: np.ndarray, recalibrated_taps: Optional[dict] = None, prefix: str = "unet"):
    """Single-sample branch forward with tap substitution.

    x is [C_in, H, W]. Emits the raw feature at every tap point; when
    recalibrated_taps maps a tap stage to a replacement raster, the branch
    resumes from the substituted feature at that point.

    Returns (logits [1, H, W], taps).
    """
    if x.ndim != 3 or x.shape[0] != cfg.in_channels:
        raise ShapeError(f"expected input [{cfg.in_channels},H,W], got {x.shape}")
    check_input_size(cfg, x.shape[1], x.shape[2])
    recalibrated_taps = recalibrated_taps or {}
    tapset = set(cfg.tap_points)
    for s in recalibrated_taps:
        if s not in tapset:
            raise ConfigError(f"stage {s} is not a tap point {cfg.tap_points}")

    cur = np.asarray(x, dtype=np.float64)[None]
    feats, taps = [], []
    for s in range(1, cfg.depth + 1):
        f, _ = encode_stage(params, f"{prefix}.enc{s}", cur)
        if s in tapset:
            taps.append(FeatureTap(stage=s, feature=f[0]))
            if s in recalibrated_taps:
                sub = np.asarray(recalibrated_taps[s], dtype=np.float64)
                if sub.shape != f[0].shape:
                    raise ShapeError(
                        f"recalibrated tap at stage {s} has shape {sub.shape}, expected {f[0].shape}"
                    )
                f = sub[None]
        feats.append(f)
        if s < cfg.depth:
            cur, _ = layers.maxpool2(f)
    logits, _ = decode(params, prefix, cfg, feats)
    return logits[0], taps


def sigmoid_probability(logits: np.ndarray) -> np.ndarray:
    """Elementwise logistic map of logits to probabilities in (0, 1)."""
    if not np.isfinite(logits).all():
        raise ShapeError("logits contain non-finite values")
    return layers.sigmoid(np.asarray(logits, dtype=np.float64))


def parameter_count(params: dict, prefix: str = "") -> int:
    return sum(int(v.size) for k, v in params.items() if k.startswith(prefix))


def _accum(grads, name, value):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value
