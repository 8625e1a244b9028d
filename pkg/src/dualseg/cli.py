"""Command-line entry point.

One JSON config file drives every subcommand; dotted-key overrides
(`--set train.seed=3`) patch it from the command line. Each run persists
the resolved configuration next to its outputs so any emitted number can
be reproduced from the run directory alone.

Subcommands: generate-data, train, evaluate, analyze-cur, predict, multi-seed.
"""

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from dualseg import dual
from dualseg.checkpoint import load_checkpoint
from dualseg.cur import run_cur_analysis
from dualseg.data import (
    MANIFEST_NAME,
    SyntheticConfig,
    generate_synthetic_dataset,
    load_manifest,
    load_tile,
)
from dualseg.errors import ConfigError, DualsegError
from dualseg.evaluation import evaluate_counts, metrics_report
from dualseg.losses import LossConfig
from dualseg.metrics import METRIC_NAMES, accumulate_confusion, binarize
from dualseg.mmtm import HStatistics
from dualseg.training import H_STATS_NAME, TrainConfig, run_multi_seed, train

RESOLVED_CONFIG_NAME = "resolved_config.json"


@dataclass(frozen=True)
class ModelSection:
    """Shared architecture of both branches; input channels come from the
    dataset manifest at build time."""

    base_channels: int = 8
    depth: int = 4
    tap_points: tuple = (1, 2, 3, 4)
    seed: int = 0


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 15
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    eval_every: int = 0
    augment: bool = True
    loss: LossConfig = field(default_factory=LossConfig)


@dataclass(frozen=True)
class AnalysisSection:
    metric: str = "f1"
    threshold: float = 0.5
    split: str = "test"

    def __post_init__(self):
        if self.metric not in METRIC_NAMES:
            raise ConfigError(f"analysis.metric must be one of {METRIC_NAMES}, got {self.metric!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"analysis.threshold must lie in (0,1), got {self.threshold}")


@dataclass(frozen=True)
class RunConfig:
    output_dir: str
    dataset_dir: str = ""
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def resolved_dataset_dir(self) -> str:
        return self.dataset_dir or str(Path(self.output_dir) / "dataset")


def _build_section(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {path!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key {path}.{unknown[0]}")
    kwargs = {}
    for name, value in doc.items():
        sub = {"data": SyntheticConfig, "model": ModelSection, "train": TrainSection,
               "analysis": AnalysisSection, "loss": LossConfig}.get(name)
        if sub is not None and isinstance(value, dict):
            kwargs[name] = _build_section(sub, value, f"{path}.{name}")
        elif name == "tap_points":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid config section {path!r}: {e}") from e


def _apply_override(doc: dict, spec: str):
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must look like dotted.key=value")
    key, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {key!r}: {part!r} is not a section")
    node[parts[-1]] = value


def load_run_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    for spec in overrides:
        _apply_override(doc, spec)
    cfg = _build_section(RunConfig, doc, "config")
    cfg.data.validate()
    return cfg


def _run_config_dict(cfg: RunConfig) -> dict:
    return {
        "output_dir": cfg.output_dir,
        "dataset_dir": cfg.resolved_dataset_dir(),
        "data": {f.name: getattr(cfg.data, f.name) for f in fields(cfg.data)},
        "model": {
            "base_channels": cfg.model.base_channels,
            "depth": cfg.model.depth,
            "tap_points": list(cfg.model.tap_points),
            "seed": cfg.model.seed,
        },
        "train": {
            **{f.name: getattr(cfg.train, f.name) for f in fields(cfg.train) if f.name != "loss"},
            "loss": {"power": cfg.train.loss.power, "epsilon": cfg.train.loss.epsilon},
        },
        "analysis": {f.name: getattr(cfg.analysis, f.name) for f in fields(cfg.analysis)},
    }


def _write_resolved(cfg: RunConfig, out_dir: Path, extra: dict = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = _run_config_dict(cfg)
    if extra:
        doc["invocation"] = extra
    (out_dir / RESOLVED_CONFIG_NAME).write_text(json.dumps(doc, indent=2) + "\n")


def _dataset_hash(manifest_root) -> str:
    data = (Path(manifest_root) / MANIFEST_NAME).read_bytes()
    return hashlib.sha256(data).hexdigest()


def _train_config(cfg: RunConfig, manifest) -> TrainConfig:
    model_cfg = dual.default_config(
        c_sar=manifest.c_sar,
        c_opt=manifest.c_opt,
        base_channels=cfg.model.base_channels,
        depth=cfg.model.depth,
        tap_points=tuple(cfg.model.tap_points),
        seed=cfg.model.seed,
    )
    t = cfg.train
    return TrainConfig(
        model=model_cfg,
        dataset_dir=cfg.resolved_dataset_dir(),
        output_dir=cfg.output_dir,
        epochs=t.epochs,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        weight_decay=t.weight_decay,
        beta1=t.beta1,
        beta2=t.beta2,
        adam_epsilon=t.adam_epsilon,
        seed=t.seed,
        eval_every=t.eval_every,
        loss=t.loss,
        augment=t.augment,
        threshold=cfg.analysis.threshold,
    )


def _load_h_stats(args, checkpoint_path, model, manifest) -> HStatistics:
    """Stored h-statistics if present, otherwise computed from the train split."""
    candidates = []
    if getattr(args, "h_stats", None):
        candidates.append(Path(args.h_stats))
    candidates.append(Path(checkpoint_path).parent / H_STATS_NAME)
    for candidate in candidates:
        if candidate.is_file():
            h_stats = HStatistics.load(candidate)
            dual.validate_h_stats(model, h_stats)
            return h_stats
    if not manifest.splits.get("train"):
        raise ConfigError(
            "cut-off evaluation needs h-statistics, but none were stored and the "
            "dataset has no train split to compute them from"
        )
    return dual.estimate_h_statistics(model, manifest)


def cmd_generate_data(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    dataset_dir = Path(cfg.resolved_dataset_dir())
    manifest = generate_synthetic_dataset(cfg.data, dataset_dir)
    _write_resolved(cfg, dataset_dir, {"command": "generate-data"})
    print(json.dumps({"dataset_dir": str(dataset_dir), "tiles": len(manifest.all_ids())}))
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    manifest = load_manifest(cfg.resolved_dataset_dir())
    train_cfg = _train_config(cfg, manifest)
    out_dir = Path(cfg.output_dir)
    _write_resolved(cfg, out_dir, {"command": "train"})
    result = train(train_cfg)
    losses = result.history.step_losses()
    print(
        json.dumps(
            {
                "checkpoint": str(result.checkpoint_path),
                "history": str(result.history_path),
                "h_stats": str(result.h_stats_path),
                "steps": len(losses),
                "final_loss": losses[-1] if losses else None,
            }
        )
    )
    return 0


_OUTPUT_ALIASES = {
    "sar": "sar",
    "opt": "opt",
    "fusion": "fusion",
    "cutoff-sar": "cutoff_sar",
    "cutoff-opt": "cutoff_opt",
}


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, args.set or []) if args.config else None
    model = load_checkpoint(args.checkpoint)
    dataset_dir = args.dataset or (cfg.resolved_dataset_dir() if cfg else None)
    if not dataset_dir:
        raise ConfigError("pass --dataset or a config with dataset_dir")
    manifest = load_manifest(dataset_dir)
    split = args.split or (cfg.analysis.split if cfg else "test")
    threshold = cfg.analysis.threshold if cfg else 0.5
    output = _OUTPUT_ALIASES[args.output]
    h_stats = None
    if output.startswith("cutoff"):
        h_stats = _load_h_stats(args, args.checkpoint, model, manifest)
    counts = evaluate_counts(
        model, manifest, split, outputs=(output,), h_stats=h_stats, threshold=threshold
    )[output]
    report = metrics_report(split, args.output, counts)
    out_dir = Path(args.out or (cfg.output_dir if cfg else Path(args.checkpoint).parent))
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"metrics_{split}_{output}.json"
    out_path.write_text(json.dumps(report, indent=2) + "\n")
    if cfg:
        _write_resolved(cfg, out_dir, {"command": "evaluate", "output": args.output})
    print(json.dumps(report))
    return 0


def cmd_analyze_cur(args) -> int:
    cfg = load_run_config(args.config, args.set or []) if args.config else None
    model = load_checkpoint(args.checkpoint)
    dataset_dir = args.dataset or (cfg.resolved_dataset_dir() if cfg else None)
    if not dataset_dir:
        raise ConfigError("pass --dataset or a config with dataset_dir")
    manifest = load_manifest(dataset_dir)
    metric = args.metric or (cfg.analysis.metric if cfg else "f1")
    split = args.split or (cfg.analysis.split if cfg else "test")
    threshold = cfg.analysis.threshold if cfg else 0.5
    h_stats = _load_h_stats(args, args.checkpoint, model, manifest)
    report = run_cur_analysis(
        model,
        h_stats,
        manifest,
        split=split,
        metric=metric,
        threshold=threshold,
        provenance={
            "checkpoint": str(args.checkpoint),
            "dataset_hash": _dataset_hash(dataset_dir),
        },
    )
    out_dir = Path(args.out or (cfg.output_dir if cfg else Path(args.checkpoint).parent))
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(out_dir / f"cur_report_{split}.json")
    if cfg:
        _write_resolved(cfg, out_dir, {"command": "analyze-cur"})
    print(json.dumps(report.to_dict()))
    return 0


_MODE_ALIASES = {
    "full": dual.MODE_FULL,
    "cutoff-to-sar": dual.MODE_CUTOFF_TO_SAR,
    "cutoff-to-opt": dual.MODE_CUTOFF_TO_OPT,
}

# agreement raster codes: TP=3, FP=2, FN=1, TN=0
_AGREEMENT_CODES = {"tp": 3, "fp": 2, "fn": 1, "tn": 0}


def _agreement_raster(mask: np.ndarray, y: np.ndarray) -> np.ndarray:
    pred = mask.astype(bool)
    true = y.astype(bool)
    out = np.zeros(mask.shape, dtype=np.uint8)
    out[pred & true] = _AGREEMENT_CODES["tp"]
    out[pred & ~true] = _AGREEMENT_CODES["fp"]
    out[~pred & true] = _AGREEMENT_CODES["fn"]
    return out


def cmd_predict(args) -> int:
    cfg = load_run_config(args.config, args.set or []) if args.config else None
    model = load_checkpoint(args.checkpoint)
    dataset_dir = args.dataset or (cfg.resolved_dataset_dir() if cfg else None)
    if not dataset_dir:
        raise ConfigError("pass --dataset or a config with dataset_dir")
    manifest = load_manifest(dataset_dir)
    threshold = cfg.analysis.threshold if cfg else 0.5
    mode = _MODE_ALIASES[args.mode]
    tile = load_tile(manifest, args.tile)
    h_stats = None
    if mode != dual.MODE_FULL:
        h_stats = _load_h_stats(args, args.checkpoint, model, manifest)
    out = dual.forward(model, tile.x_sar.astype(np.float64), tile.x_opt.astype(np.float64),
                       mode=mode, h_stats=h_stats)
    out_dir = Path(args.out or (cfg.output_dir if cfg else Path(args.checkpoint).parent))
    out_dir.mkdir(parents=True, exist_ok=True)

    files = {}
    produced = {"sar": out.p_sar, "opt": out.p_opt, "fusion": out.p}
    for name, prob in produced.items():
        if prob is None:
            continue
        stem = f"{args.tile}.{args.mode}.{name}"
        prob_path = out_dir / f"{stem}.prob.bin"
        prob_path.write_bytes(np.ascontiguousarray(prob, dtype="<f4").tobytes())
        mask = binarize(prob, threshold)
        mask_path = out_dir / f"{stem}.mask.bin"
        mask_path.write_bytes(mask.tobytes())
        agree_path = out_dir / f"{stem}.agreement.bin"
        agree_path.write_bytes(_agreement_raster(mask, tile.y).tobytes())
        files[name] = {
            "prob": prob_path.name,
            "mask": mask_path.name,
            "agreement": agree_path.name,
        }
    meta = {
        "tile": args.tile,
        "mode": args.mode,
        "threshold": threshold,
        "shape": [1, manifest.height, manifest.width],
        "agreement_codes": _AGREEMENT_CODES,
        "files": files,
        "checkpoint": str(args.checkpoint),
        "dataset_hash": _dataset_hash(dataset_dir),
    }
    (out_dir / f"{args.tile}.{args.mode}.predict.json").write_text(json.dumps(meta, indent=2) + "\n")
    if cfg:
        _write_resolved(cfg, out_dir, {"command": "predict", "tile": args.tile})
    print(json.dumps(meta))
    return 0


def cmd_multi_seed(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    manifest = load_manifest(cfg.resolved_dataset_dir())
    train_cfg = _train_config(cfg, manifest)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    out_dir = Path(cfg.output_dir)
    _write_resolved(cfg, out_dir, {"command": "multi-seed", "seeds": seeds})
    per_seed, aggregate = run_multi_seed(
        train_cfg, seeds, split=cfg.analysis.split, metric=cfg.analysis.metric
    )
    doc = {"seeds": per_seed, "aggregate": aggregate}
    (out_dir / "aggregate.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps(doc["aggregate"]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualseg",
        description="Dual-branch SAR/optical segmentation with modality-utilization analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required):
        p.add_argument("--config", required=config_required, help="run config JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a dotted config key (repeatable)")

    p = sub.add_parser("generate-data", help="generate a synthetic paired-modality dataset")
    add_common(p, True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train the dual-branch network")
    add_common(p, True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="precision/recall/F1 of one network output")
    add_common(p, False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory (defaults to config dataset_dir)")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--output", default="fusion", choices=sorted(_OUTPUT_ALIASES))
    p.add_argument("--h-stats", dest="h_stats", help="h-statistics JSON for cut-off outputs")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-cur", help="conditional utilization rates and imbalance")
    add_common(p, False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--metric", choices=METRIC_NAMES)
    p.add_argument("--h-stats", dest="h_stats")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_cur)

    p = sub.add_parser("predict", help="write probability maps, masks, and agreement rasters")
    add_common(p, False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--tile", required=True)
    p.add_argument("--mode", default="full", choices=sorted(_MODE_ALIASES))
    p.add_argument("--h-stats", dest="h_stats")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("multi-seed", help="train several seeds and aggregate final metrics")
    add_common(p, True)
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.set_defaults(func=cmd_multi_seed)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DualsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
