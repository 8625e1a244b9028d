"""dualseg: dual-branch SAR/optical segmentation with fusion modules,
single-modality counterfactuals, and modality-utilization analysis."""

__version__ = "0.1.0"

from dualseg.cur import CurReport, compute_cur, compute_d_util, run_cur_analysis
from dualseg.data import (
    AugmentDraw,
    DatasetManifest,
    SyntheticConfig,
    Tile,
    augment,
    generate_synthetic_dataset,
    load_manifest,
    load_tile,
)
from dualseg.dual import (
    BranchOutput,
    DualModel,
    DualModelConfig,
    default_config,
    estimate_h_statistics,
    forward,
    initialize,
)
from dualseg.losses import LossConfig, composite_loss, power_jaccard_loss
from dualseg.metrics import ConfusionCounts, accumulate_confusion, compute_prf1
from dualseg.mmtm import HStatistics, MmtmActivations, mmtm_forward, squeeze
from dualseg.training import TrainConfig, run_multi_seed, train
from dualseg.unet import FeatureTap, UnetConfig, sigmoid_probability, unet_forward

__all__ = [
    "AugmentDraw",
    "BranchOutput",
    "ConfusionCounts",
    "CurReport",
    "DatasetManifest",
    "DualModel",
    "DualModelConfig",
    "FeatureTap",
    "HStatistics",
    "LossConfig",
    "MmtmActivations",
    "SyntheticConfig",
    "Tile",
    "TrainConfig",
    "UnetConfig",
    "accumulate_confusion",
    "augment",
    "composite_loss",
    "compute_cur",
    "compute_d_util",
    "compute_prf1",
    "default_config",
    "estimate_h_statistics",
    "forward",
    "generate_synthetic_dataset",
    "initialize",
    "load_manifest",
    "load_tile",
    "mmtm_forward",
    "power_jaccard_loss",
    "run_cur_analysis",
    "run_multi_seed",
    "sigmoid_probability",
    "squeeze",
    "train",
    "unet_forward",
]
