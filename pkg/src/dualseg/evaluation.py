"""Batched dataset evaluation: confusion counts per network output."""

import numpy as np

from dualseg import dual
from dualseg.data import DatasetManifest, load_tile
from dualseg.errors import ConfigError
from dualseg.metrics import ConfusionCounts, accumulate_confusion, binarize, compute_prf1

# network outputs: the two branch maps and their fusion (full mode) plus the
# two single-modality counterfactuals
OUTPUTS = ("sar", "opt", "fusion", "cutoff_sar", "cutoff_opt")
FULL_OUTPUTS = ("sar", "opt", "fusion")


def iter_batches(manifest: DatasetManifest, split: str, batch_size: int = 8):
    """Yields (ids, x_sar, x_opt, y) float64/uint8 batches in manifest order."""
    ids = manifest.ids(split)
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        tiles = [load_tile(manifest, t) for t in chunk]
        xs = np.stack([t.x_sar for t in tiles]).astype(np.float64)
        xo = np.stack([t.x_opt for t in tiles]).astype(np.float64)
        y = np.stack([t.y for t in tiles])
        yield chunk, xs, xo, y


def evaluate_counts(
    model: dual.DualModel,
    manifest: DatasetManifest,
    split: str,
    outputs=FULL_OUTPUTS,
    h_stats=None,
    threshold: float = 0.5,
    batch_size: int = 8,
) -> dict:
    """Micro-averaged confusion counts for each requested output."""
    for out in outputs:
        if out not in OUTPUTS:
            raise ConfigError(f"unknown output {out!r}; expected one of {OUTPUTS}")
    if not manifest.ids(split):
        raise ConfigError(f"split {split!r} is empty")
    need_full = any(o in FULL_OUTPUTS for o in outputs)
    counts = {out: ConfusionCounts() for out in outputs}
    for _, xs, xo, y in iter_batches(manifest, split, batch_size):
        probs = {}
        if need_full:
            p_sar, p_opt, p, _ = dual.forward_full_batch(model, xs, xo)
            probs.update({"sar": p_sar, "opt": p_opt, "fusion": p})
        if "cutoff_sar" in outputs:
            probs["cutoff_sar"] = dual.forward_cutoff_batch(model, xs, "sar", h_stats)
        if "cutoff_opt" in outputs:
            probs["cutoff_opt"] = dual.forward_cutoff_batch(model, xo, "opt", h_stats)
        for out in outputs:
            counts[out] = accumulate_confusion(binarize(probs[out], threshold), y, counts[out])
    return counts


def metrics_report(split: str, mode: str, counts: ConfusionCounts) -> dict:
    precision, recall, f1 = compute_prf1(counts)
    return {
        "split": split,
        "mode": mode,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "counts": counts.to_dict(),
    }
