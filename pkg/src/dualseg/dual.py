"""Two branches plus four fusion modules: the full multi-modal network.

Forward modes:
  full           both encoders advance stage by stage; at every tap stage the
                 fusion module recalibrates both feature stacks before they
                 re-enter their branches (skips and pooling both see the
                 recalibrated features); outputs p_sar, p_opt and their mean.
  cutoff_to_sar  only the SAR branch runs; at every module the optical squeeze
                 vector is replaced by its stored training-set mean.
  cutoff_to_opt  the mirror image.
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from dualseg import layers, mmtm, unet
from dualseg.data import DatasetManifest, load_tile
from dualseg.errors import ConfigError, ShapeError

MODE_FULL = "full"
MODE_CUTOFF_TO_SAR = "cutoff_to_sar"
MODE_CUTOFF_TO_OPT = "cutoff_to_opt"
MODES = (MODE_FULL, MODE_CUTOFF_TO_SAR, MODE_CUTOFF_TO_OPT)


@dataclass(frozen=True)
class DualModelConfig:
    sar: unet.UnetConfig
    opt: unet.UnetConfig
    seed: int = 0

    def __post_init__(self):
        if self.sar.depth != self.opt.depth:
            raise ConfigError("both branches must share the same depth")
        if tuple(self.sar.tap_points) != tuple(self.opt.tap_points):
            raise ConfigError("both branches must share the same tap points")

    @property
    def tap_stages(self) -> tuple:
        return tuple(sorted(self.sar.tap_points))

    def mmtm_widths(self) -> list:
        ws, wo = self.sar.stage_channels(), self.opt.stage_channels()
        return [(ws[s - 1], wo[s - 1]) for s in self.tap_stages]

    def to_dict(self) -> dict:
        def branch(c):
            return {
                "in_channels": c.in_channels,
                "base_channels": c.base_channels,
                "depth": c.depth,
                "tap_points": list(c.tap_points),
            }

        return {"sar": branch(self.sar), "opt": branch(self.opt), "seed": self.seed}

    @classmethod
    def from_dict(cls, doc: dict) -> "DualModelConfig":
        def branch(d):
            return unet.UnetConfig(
                in_channels=int(d["in_channels"]),
                base_channels=int(d["base_channels"]),
                depth=int(d["depth"]),
                tap_points=tuple(d["tap_points"]),
            )

        return cls(sar=branch(doc["sar"]), opt=branch(doc["opt"]), seed=int(doc["seed"]))


@dataclass
class DualModel:
    config: DualModelConfig
    params: dict  # fully-qualified name -> float64 array


@dataclass
class BranchOutput:
    """Probability maps of one forward pass; absent fields are None in
    cut-off modes (only the surviving branch is evaluated)."""

    mode: str
    p_sar: Optional[np.ndarray] = None
    p_opt: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None


def initialize(config: DualModelConfig, rng: Optional[np.random.Generator] = None) -> DualModel:
    """Deterministic initialization: equal seeds give identical parameters."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    params = {}
    params.update(unet.init_unet_params(config.sar, rng, "sar"))
    params.update(unet.init_unet_params(config.opt, rng, "opt"))
    for i, (c1, c2) in enumerate(config.mmtm_widths()):
        params.update(mmtm.init_mmtm_params(c1, c2, rng, f"mmtm{i}"))
    return DualModel(config=config, params=params)


def zero_excitation_heads(model: DualModel):
    """Zero every excitation head so all gates sit exactly at 1 (identity fusion)."""
    for name in model.params:
        if ".e_sar." in name or ".e_opt." in name:
            model.params[name][...] = 0.0


def _check_pair(model, xs, xo):
    cfg = model.config
    if xs.shape[1] != cfg.sar.in_channels:
        raise ShapeError(f"SAR input has {xs.shape[1]} channels, expected {cfg.sar.in_channels}")
    if xo.shape[1] != cfg.opt.in_channels:
        raise ShapeError(f"optical input has {xo.shape[1]} channels, expected {cfg.opt.in_channels}")
    if xs.shape[2:] != xo.shape[2:]:
        raise ShapeError(f"modalities disagree on spatial size: {xs.shape[2:]} vs {xo.shape[2:]}")
    unet.check_input_size(cfg.sar, xs.shape[2], xs.shape[3])


def forward_full_batch(model: DualModel, xs: np.ndarray, xo: np.ndarray, want_cache: bool = False):
    """Interleaved full-fusion forward on a batch.

    Returns (p_sar, p_opt, p, acts) and, when want_cache, the cache needed
    by backward_full_batch. acts is the per-module MmtmActivations list.
    """
    cfg = model.config
    params = model.params
    _check_pair(model, xs, xo)
    taps = cfg.tap_stages
    cur_s, cur_o = xs, xo
    feats_s, feats_o, acts = [], [], []
    cache = {"enc_s": [], "enc_o": [], "mmtm": [], "pool_s": [], "pool_o": []}
    for s in range(1, cfg.sar.depth + 1):
        f_s, ec_s = unet.encode_stage(params, f"sar.enc{s}", cur_s)
        f_o, ec_o = unet.encode_stage(params, f"opt.enc{s}", cur_o)
        cache["enc_s"].append(ec_s)
        cache["enc_o"].append(ec_o)
        if s in taps:
            i = taps.index(s)
            out = mmtm.mmtm_forward(params, f"mmtm{i}", f_s, f_o, want_cache=want_cache)
            if want_cache:
                f_s, f_o, act, mc = out
                cache["mmtm"].append(mc)
            else:
                f_s, f_o, act = out
            acts.append(act)
        feats_s.append(f_s)
        feats_o.append(f_o)
        if s < cfg.sar.depth:
            cur_s, idx_s = layers.maxpool2(f_s)
            cur_o, idx_o = layers.maxpool2(f_o)
            cache["pool_s"].append(idx_s)
            cache["pool_o"].append(idx_o)
    logits_s, dec_s = unet.decode(params, "sar", cfg.sar, feats_s)
    logits_o, dec_o = unet.decode(params, "opt", cfg.opt, feats_o)
    p_sar = layers.sigmoid(logits_s)
    p_opt = layers.sigmoid(logits_o)
    p = 0.5 * (p_sar + p_opt)
    if not want_cache:
        return p_sar, p_opt, p, acts
    cache["dec_s"] = dec_s
    cache["dec_o"] = dec_o
    cache["feats_s"] = feats_s
    cache["feats_o"] = feats_o
    cache["p_sar"] = p_sar
    cache["p_opt"] = p_opt
    return p_sar, p_opt, p, acts, cache


def backward_full_batch(model: DualModel, cache: dict, dlogits_s: np.ndarray, dlogits_o: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given the loss
    gradients w.r.t. both branch logits."""
    cfg = model.config
    params = model.params
    taps = cfg.tap_stages
    grads = {}
    dfeats_s = unet.decode_backward(params, "sar", cfg.sar, dlogits_s, cache["dec_s"], grads)
    dfeats_o = unet.decode_backward(params, "opt", cfg.opt, dlogits_o, cache["dec_o"], grads)
    dnext_s = dnext_o = None
    for s in range(cfg.sar.depth, 0, -1):
        df_s = dfeats_s[s - 1]
        df_o = dfeats_o[s - 1]
        if s < cfg.sar.depth:
            df_s = df_s + layers.maxpool2_backward(
                dnext_s, cache["pool_s"][s - 1], cache["feats_s"][s - 1].shape
            )
            df_o = df_o + layers.maxpool2_backward(
                dnext_o, cache["pool_o"][s - 1], cache["feats_o"][s - 1].shape
            )
        if s in taps:
            i = taps.index(s)
            df_s, df_o = mmtm.mmtm_backward(params, f"mmtm{i}", cache["mmtm"][i], df_s, df_o, grads)
        dnext_s = unet.encode_stage_backward(params, f"sar.enc{s}", df_s, cache["enc_s"][s - 1], grads)
        dnext_o = unet.encode_stage_backward(params, f"opt.enc{s}", df_o, cache["enc_o"][s - 1], grads)
    for name in model.params:
        if name not in grads:
            grads[name] = np.zeros_like(model.params[name])
    return grads


def forward_cutoff_batch(model: DualModel, x_self: np.ndarray, side: str, h_stats: mmtm.HStatistics) -> np.ndarray:
    """Single-modality counterfactual: run one branch, substituting the other
    modality's stored mean squeeze vector at every fusion module."""
    if side not in ("sar", "opt"):
        raise ConfigError(f"side must be 'sar' or 'opt', got {side!r}")
    if h_stats is None:
        raise ConfigError("cut-off modes require h-statistics estimated on the training split")
    cfg = model.config
    branch_cfg = cfg.sar if side == "sar" else cfg.opt
    params = model.params
    if x_self.shape[1] != branch_cfg.in_channels:
        raise ShapeError(
            f"{side} input has {x_self.shape[1]} channels, expected {branch_cfg.in_channels}"
        )
    unet.check_input_size(branch_cfg, x_self.shape[2], x_self.shape[3])
    validate_h_stats(model, h_stats)
    taps = cfg.tap_stages
    cur = x_self
    feats = []
    for s in range(1, branch_cfg.depth + 1):
        f, _ = unet.encode_stage(params, f"{side}.enc{s}", cur)
        if s in taps:
            i = taps.index(s)
            entry = h_stats.entry(i)
            h_other = entry.h_bar_opt if side == "sar" else entry.h_bar_sar
            f = mmtm.mmtm_forward_single(params, f"mmtm{i}", f, h_other, side)
        feats.append(f)
        if s < branch_cfg.depth:
            cur, _ = layers.maxpool2(f)
    logits, _ = unet.decode(params, side, branch_cfg, feats)
    return layers.sigmoid(logits)


def validate_h_stats(model: DualModel, h_stats: mmtm.HStatistics):
    widths = model.config.mmtm_widths()
    if len(h_stats.entries) != len(widths):
        raise ConfigError(
            f"h-statistics cover {len(h_stats.entries)} modules, model has {len(widths)}"
        )
    for i, (c1, c2) in enumerate(widths):
        e = h_stats.entry(i)
        if e.h_bar_sar.shape != (c1,) or e.h_bar_opt.shape != (c2,):
            raise ConfigError(
                f"h-statistics entry {i} has widths {e.h_bar_sar.shape[0]}/{e.h_bar_opt.shape[0]}, "
                f"model expects {c1}/{c2}"
            )


def forward(
    model: DualModel,
    x_sar: Optional[np.ndarray],
    x_opt: Optional[np.ndarray],
    mode: str = MODE_FULL,
    h_stats: Optional[mmtm.HStatistics] = None,
) -> BranchOutput:
    """Single-tile forward. Inputs are [C, H, W]; outputs are [1, H, W].

    In cut-off modes the unused modality may be None and is never evaluated.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == MODE_FULL:
        if x_sar is None or x_opt is None:
            raise ConfigError("full mode requires both modalities")
        p_sar, p_opt, p, _ = forward_full_batch(
            model, _single(x_sar), _single(x_opt)
        )
        return BranchOutput(mode=mode, p_sar=p_sar[0], p_opt=p_opt[0], p=p[0])
    if mode == MODE_CUTOFF_TO_SAR:
        if x_sar is None:
            raise ConfigError("cutoff_to_sar requires the SAR input")
        p = forward_cutoff_batch(model, _single(x_sar), "sar", h_stats)
        return BranchOutput(mode=mode, p_sar=p[0])
    if x_opt is None:
        raise ConfigError("cutoff_to_opt requires the optical input")
    p = forward_cutoff_batch(model, _single(x_opt), "opt", h_stats)
    return BranchOutput(mode=mode, p_opt=p[0])


def _single(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected a single [C,H,W] raster, got shape {x.shape}")
    return x[None]


def estimate_h_statistics(model: DualModel, manifest: DatasetManifest, batch_size: int = 8) -> mmtm.HStatistics:
    """Mean squeeze vectors over the training split (inference mode, no
    augmentation), accumulated in manifest order."""
    ids = manifest.ids("train")
    if not ids:
        raise ConfigError("training split is empty; cannot estimate h-statistics")
    widths = model.config.mmtm_widths()
    sums = [
        (np.zeros(c1), np.zeros(c2))
        for c1, c2 in widths
    ]
    n = 0
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        xs = np.stack([load_tile(manifest, t).x_sar for t in chunk]).astype(np.float64)
        xo = np.stack([load_tile(manifest, t).x_opt for t in chunk]).astype(np.float64)
        _, _, _, acts = forward_full_batch(model, xs, xo)
        for i, act in enumerate(acts):
            sums[i][0][...] += act.h_sar.sum(axis=0)
            sums[i][1][...] += act.h_opt.sum(axis=0)
        n += len(chunk)
    return mmtm.HStatistics(
        entries=[
            mmtm.HEntry(index=i, n=n, h_bar_sar=s_sar / n, h_bar_opt=s_opt / n)
            for i, (s_sar, s_opt) in enumerate(sums)
        ]
    )


def default_config(c_sar: int, c_opt: int, base_channels: int = 8, depth: int = 4,
                   tap_points: tuple = None, seed: int = 0) -> DualModelConfig:
    """Desk-scale default: both branches share shape, four fusion modules."""
    if tap_points is None:
        tap_points = tuple(range(1, depth + 1))
    return DualModelConfig(
        sar=unet.UnetConfig(in_channels=c_sar, base_channels=base_channels, depth=depth, tap_points=tap_points),
        opt=unet.UnetConfig(in_channels=c_opt, base_channels=base_channels, depth=depth, tap_points=tap_points),
        seed=seed,
    )
