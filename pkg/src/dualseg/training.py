"""Training loop: per-branch overlap losses, seeded shuffling/augmentation,
decoupled-weight-decay adaptive updates, and multi-seed orchestration.

A run's seed drives weight initialization, epoch shuffling, and augmentation
draws through independent child generators, so two runs with equal config
and seed produce byte-identical checkpoints and histories.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dualseg import dual
from dualseg.checkpoint import save_checkpoint
from dualseg.cur import run_cur_analysis
from dualseg.data import (
    DatasetManifest,
    apply_geometric,
    load_manifest,
    load_tile,
    random_augment_draw,
)
from dualseg.errors import ConfigError, DivergenceError
from dualseg.evaluation import evaluate_counts
from dualseg.losses import LossConfig, batch_power_jaccard_grad
from dualseg.metrics import compute_prf1
from dualseg.mmtm import HStatistics

CHECKPOINT_NAME = "checkpoint.npz"
BEST_CHECKPOINT_NAME = "best.npz"
HISTORY_NAME = "history.jsonl"
H_STATS_NAME = "h_stats.json"


@dataclass(frozen=True)
class TrainConfig:
    model: dual.DualModelConfig
    dataset_dir: str
    output_dir: str
    epochs: int = 15
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # epochs between validation passes; 0 disables
    loss: LossConfig = field(default_factory=LossConfig)
    augment: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "dataset_dir": str(self.dataset_dir),
            "output_dir": str(self.output_dir),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_epsilon": self.adam_epsilon,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "loss": {"power": self.loss.power, "epsilon": self.loss.epsilon},
            "augment": self.augment,
            "threshold": self.threshold,
        }


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(self.params):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = self.params[name]
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def add(self, record: dict):
        self.records.append(record)

    def step_losses(self) -> list:
        return [r["loss"] for r in self.records if r.get("type") == "step"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def save(self, path):
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "TrainHistory":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        return cls(records=records)


@dataclass
class TrainResult:
    model: dual.DualModel
    history: TrainHistory
    h_stats: "HStatistics"
    checkpoint_path: Path
    h_stats_path: Path
    history_path: Path
    best_checkpoint_path: Path = None


def _load_split(manifest: DatasetManifest, split: str):
    ids = manifest.ids(split)
    xs = np.stack([load_tile(manifest, t).x_sar for t in ids]).astype(np.float64)
    xo = np.stack([load_tile(manifest, t).x_opt for t in ids]).astype(np.float64)
    y = np.stack([load_tile(manifest, t).y for t in ids]).astype(np.float64)
    return xs, xo, y


def batch_loss_and_grads(model, xs, xo, y, loss_cfg, sar_weight=1.0, opt_weight=1.0):
    """Mean per-sample composite loss over a batch and its parameter grads.

    The branch weights exist for gradient-flow diagnostics; training always
    uses (1, 1).
    """
    n = xs.shape[0]
    p_sar, p_opt, _, _, cache = dual.forward_full_batch(model, xs, xo, want_cache=True)
    losses_s, dp_sar = batch_power_jaccard_grad(p_sar, y, loss_cfg)
    losses_o, dp_opt = batch_power_jaccard_grad(p_opt, y, loss_cfg)
    loss = float((sar_weight * losses_s + opt_weight * losses_o).mean())
    dlogits_s = (sar_weight / n) * dp_sar * p_sar * (1.0 - p_sar)
    dlogits_o = (opt_weight / n) * dp_opt * p_opt * (1.0 - p_opt)
    grads = dual.backward_full_batch(model, cache, dlogits_s, dlogits_o)
    return loss, grads


def _validation_record(model, manifest, epoch, threshold):
    counts = evaluate_counts(model, manifest, "val", threshold=threshold)
    record = {"type": "eval", "epoch": epoch}
    for out, key in (("sar", "f1_sar"), ("opt", "f1_opt"), ("fusion", "f1_fusion")):
        record[key] = compute_prf1(counts[out])[2]
    return record


def train(config: TrainConfig) -> TrainResult:
    """Run the optimization loop and write checkpoint, history, and
    h-statistics under config.output_dir."""
    manifest = load_manifest(config.dataset_dir)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    root_ss = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss, augment_ss = root_ss.spawn(3)
    model = dual.initialize(config.model, rng=np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    augment_rng = np.random.default_rng(augment_ss)

    xs_all, xo_all, y_all = _load_split(manifest, "train")
    n = xs_all.shape[0]

    optimizer = AdamW(
        model.params,
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_epsilon,
        weight_decay=config.weight_decay,
    )
    history = TrainHistory()
    history.add({"type": "meta", "config": config.to_dict()})

    best_f1 = -1.0
    best_params = None
    best_epoch = None
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            xs = xs_all[batch].copy()
            xo = xo_all[batch].copy()
            y = y_all[batch].copy()
            if config.augment:
                for j in range(len(batch)):
                    draw = random_augment_draw(augment_rng)
                    xs[j] = apply_geometric(xs[j], draw)
                    xo[j] = apply_geometric(xo[j], draw)
                    y[j] = apply_geometric(y[j], draw)
            loss, grads = batch_loss_and_grads(model, xs, xo, y, config.loss)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss} at step {step + 1} (epoch {epoch}); "
                    f"try a lower learning rate"
                )
            optimizer.step(grads)
            step += 1
            history.add({"type": "step", "step": step, "epoch": epoch, "loss": loss})
        if config.eval_every and epoch % config.eval_every == 0 and manifest.splits.get("val"):
            record = _validation_record(model, manifest, epoch, config.threshold)
            history.add(record)
            if record["f1_fusion"] > best_f1:
                best_f1 = record["f1_fusion"]
                best_params = {k: v.copy() for k, v in model.params.items()}
                best_epoch = epoch

    checkpoint_path = out_dir / CHECKPOINT_NAME
    save_checkpoint(checkpoint_path, model)
    best_path = None
    if best_params is not None:
        best_path = out_dir / BEST_CHECKPOINT_NAME
        save_checkpoint(best_path, dual.DualModel(config=model.config, params=best_params))
        history.add({"type": "best", "epoch": best_epoch, "f1_fusion": best_f1})

    h_stats = dual.estimate_h_statistics(model, manifest, batch_size=config.batch_size)
    h_stats_path = out_dir / H_STATS_NAME
    h_stats.save(h_stats_path)

    history_path = out_dir / HISTORY_NAME
    history.save(history_path)
    return TrainResult(
        model=model,
        history=history,
        h_stats=h_stats,
        checkpoint_path=checkpoint_path,
        h_stats_path=h_stats_path,
        history_path=history_path,
        best_checkpoint_path=best_path,
    )


def _aggregate(values: list) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


def run_multi_seed(config: TrainConfig, seeds, split: str = "test", metric: str = "f1"):
    """Independent runs per seed; aggregates final test metrics and the
    utilization analysis with sample standard deviations."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    manifest = load_manifest(config.dataset_dir)
    per_seed = []
    for seed in seeds:
        run_cfg = replace(config, seed=seed, output_dir=str(Path(config.output_dir) / f"seed_{seed}"))
        try:
            result = train(run_cfg)
        except Exception as e:
            raise DivergenceError(f"run for seed {seed} failed: {e}") from e
        h_stats = result.h_stats
        counts = evaluate_counts(result.model, manifest, split, threshold=config.threshold)
        record = {"seed": seed}
        for out in ("sar", "opt", "fusion"):
            precision, recall, f1 = compute_prf1(counts[out])
            record[f"precision_{out}"] = precision
            record[f"recall_{out}"] = recall
            record[f"f1_{out}"] = f1
        report = run_cur_analysis(
            result.model, h_stats, manifest, split=split, metric=metric,
            threshold=config.threshold, batch_size=config.batch_size,
        )
        record["u_sar_given_opt"] = report.u_sar_given_opt
        record["u_opt_given_sar"] = report.u_opt_given_sar
        record["d_util"] = report.d_util
        report.save(Path(run_cfg.output_dir) / "cur_report.json")
        per_seed.append(record)
    keys = [k for k in per_seed[0] if k != "seed"]
    aggregate = {k: _aggregate([r[k] for r in per_seed]) for k in keys}
    return per_seed, aggregate
