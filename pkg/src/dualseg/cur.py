"""Conditional utilization rates and the utilization-imbalance statistic.

The utilization of one modality given the other is the relative accuracy a
branch loses when the first modality's information flow is cut off:

    u(sar|opt) = (A(p_opt) - A(p'_opt)) / A(p_opt)
    u(opt|sar) = (A(p_sar) - A(p'_sar)) / A(p_sar)
    d_util     = u(sar|opt) - u(opt|sar)

where A is the plugged-in accuracy metric and the primed maps are the
single-modality counterfactuals.
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from dualseg import dual
from dualseg.data import DatasetManifest
from dualseg.errors import ConfigError
from dualseg.evaluation import evaluate_counts
from dualseg.metrics import metric_value
from dualseg.mmtm import HStatistics


def compute_cur(a_full: float, a_cut: float) -> float:
    """Relative accuracy drop when the other modality is cut off. Negative
    values (cut-off beats fusion) are reported as-is."""
    if a_full <= 0.0:
        raise ConfigError(f"utilization rate undefined: full-mode accuracy is {a_full}")
    return (a_full - a_cut) / a_full


def compute_d_util(u_sar_given_opt: float, u_opt_given_sar: float) -> float:
    return u_sar_given_opt - u_opt_given_sar


@dataclass
class CurReport:
    a_sar_full: float
    a_opt_full: float
    a_fusion: float
    a_sar_cut: float
    a_opt_cut: float
    u_sar_given_opt: float
    u_opt_given_sar: float
    d_util: float
    accuracy_metric_name: str
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "a_sar_full": self.a_sar_full,
            "a_opt_full": self.a_opt_full,
            "a_fusion": self.a_fusion,
            "a_sar_cut": self.a_sar_cut,
            "a_opt_cut": self.a_opt_cut,
            "u_sar_given_opt": self.u_sar_given_opt,
            "u_opt_given_sar": self.u_opt_given_sar,
            "d_util": self.d_util,
            "accuracy_metric_name": self.accuracy_metric_name,
            "provenance": self.provenance,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "CurReport":
        return cls(**doc)


def run_cur_analysis(
    model: dual.DualModel,
    h_stats: HStatistics,
    manifest: DatasetManifest,
    split: str = "test",
    metric: str = "f1",
    threshold: float = 0.5,
    batch_size: int = 8,
    provenance: dict = None,
) -> CurReport:
    """Evaluate all five outputs on one split and derive both utilization
    rates plus their imbalance."""
    if h_stats is None:
        raise ConfigError("utilization analysis requires h-statistics")
    dual.validate_h_stats(model, h_stats)
    counts = evaluate_counts(
        model,
        manifest,
        split,
        outputs=("sar", "opt", "fusion", "cutoff_sar", "cutoff_opt"),
        h_stats=h_stats,
        threshold=threshold,
        batch_size=batch_size,
    )
    a = {out: metric_value(metric, c) for out, c in counts.items()}
    u_sar_given_opt = compute_cur(a["opt"], a["cutoff_opt"])
    u_opt_given_sar = compute_cur(a["sar"], a["cutoff_sar"])
    for name, value in (("u(sar|opt)", u_sar_given_opt), ("u(opt|sar)", u_opt_given_sar)):
        if value < 0.0:
            warnings.warn(
                f"{name} = {value:.4f} is negative: the cut-off output beats full fusion",
                RuntimeWarning,
                stacklevel=2,
            )
    prov = {"metric": metric, "threshold": threshold, "split": split}
    prov.update(provenance or {})
    return CurReport(
        a_sar_full=a["sar"],
        a_opt_full=a["opt"],
        a_fusion=a["fusion"],
        a_sar_cut=a["cutoff_sar"],
        a_opt_cut=a["cutoff_opt"],
        u_sar_given_opt=u_sar_given_opt,
        u_opt_given_sar=u_opt_given_sar,
        d_util=compute_d_util(u_sar_given_opt, u_opt_given_sar),
        accuracy_metric_name=metric,
        provenance=prov,
    )
