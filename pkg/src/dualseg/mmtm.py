"""Cross-modal transfer module: squeeze, joint projection, excitation gating.

Each module squeezes both feature stacks to channel vectors, projects their
concatenation to a joint code, and emits per-channel multiplicative gates in
(0, 2) back to each branch. Replacing one squeeze vector with a stored
training-set mean severs that branch's influence on the other, which is what
the single-modality counterfactual predictions are built on.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dualseg import layers
from dualseg.errors import ConfigError, ShapeError


def joint_dim(c1: int, c2: int) -> int:
    """Width of the joint representation: quarter of the concatenated width."""
    return max(1, (c1 + c2) // 4)


def init_mmtm_params(c1: int, c2: int, rng: np.random.Generator, prefix: str) -> dict:
    cz = joint_dim(c1, c2)
    cat = c1 + c2
    return {
        f"{prefix}.z.w": rng.normal(0.0, np.sqrt(2.0 / cat), size=(cz, cat)),
        f"{prefix}.z.b": np.zeros(cz),
        f"{prefix}.e_sar.w": rng.normal(0.0, np.sqrt(1.0 / cz), size=(c1, cz)),
        f"{prefix}.e_sar.b": np.zeros(c1),
        f"{prefix}.e_opt.w": rng.normal(0.0, np.sqrt(1.0 / cz), size=(c2, cz)),
        f"{prefix}.e_opt.b": np.zeros(c2),
    }


def squeeze(f: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of one [C, h, w] feature raster."""
    if f.ndim != 3:
        raise ShapeError(f"squeeze expects [C,h,w], got shape {f.shape}")
    return f.mean(axis=(1, 2))


def squeeze_batch(f: np.ndarray) -> np.ndarray:
    return f.mean(axis=(2, 3))


@dataclass
class MmtmActivations:
    """Squeeze vectors (raw and as used after any substitution) and gates."""

    h_sar: np.ndarray
    h_opt: np.ndarray
    h_sar_used: np.ndarray
    h_opt_used: np.ndarray
    e_sar: np.ndarray
    e_opt: np.ndarray


def _excite(params, prefix, h_cat, sides):
    """Shared core: joint projection then the requested excitation heads."""
    z = layers.relu(layers.dense(h_cat, params[f"{prefix}.z.w"], params[f"{prefix}.z.b"]))
    gates = {}
    for side in sides:
        pre = layers.dense(z, params[f"{prefix}.e_{side}.w"], params[f"{prefix}.e_{side}.b"])
        gates[side] = 2.0 * layers.sigmoid(pre)
    return z, gates


def mmtm_forward(
    params: dict,
    prefix: str,
    f_sar: np.ndarray,
    f_opt: np.ndarray,
    replace_h_sar: np.ndarray = None,
    replace_h_opt: np.ndarray = None,
    want_cache: bool = False,
):
    """Recalibrate both feature stacks; returns (f_sar~, f_opt~, activations[, cache]).

    Inputs are batched [N, C, h, w]. At most one replace_h_* may be given;
    the substituted vector replaces the raw squeeze before concatenation.
    """
    if replace_h_sar is not None and replace_h_opt is not None:
        raise ConfigError("at most one squeeze vector may be overridden per module")
    c1 = params[f"{prefix}.e_sar.b"].shape[0]
    c2 = params[f"{prefix}.e_opt.b"].shape[0]
    if f_sar.shape[1] != c1 or f_opt.shape[1] != c2:
        raise ShapeError(
            f"{prefix}: feature widths {f_sar.shape[1]}/{f_opt.shape[1]} do not match "
            f"parameter widths {c1}/{c2}"
        )
    n = f_sar.shape[0]
    h_sar = squeeze_batch(f_sar)
    h_opt = squeeze_batch(f_opt)
    h_sar_used = h_sar if replace_h_sar is None else _as_batch(replace_h_sar, n, c1, prefix)
    h_opt_used = h_opt if replace_h_opt is None else _as_batch(replace_h_opt, n, c2, prefix)
    h_cat = np.concatenate([h_sar_used, h_opt_used], axis=1)
    z, gates = _excite(params, prefix, h_cat, ("sar", "opt"))
    f_sar_t = f_sar * gates["sar"][:, :, None, None]
    f_opt_t = f_opt * gates["opt"][:, :, None, None]
    acts = MmtmActivations(h_sar, h_opt, h_sar_used, h_opt_used, gates["sar"], gates["opt"])
    if not want_cache:
        return f_sar_t, f_opt_t, acts
    cache = {
        "f_sar": f_sar,
        "f_opt": f_opt,
        "h_cat": h_cat,
        "z": z,
        "e_sar": gates["sar"],
        "e_opt": gates["opt"],
        "sar_overridden": replace_h_sar is not None,
        "opt_overridden": replace_h_opt is not None,
    }
    return f_sar_t, f_opt_t, acts, cache


def mmtm_forward_single(params, prefix, f_self, h_other, side):
    """Cut-off path: gate one branch using a stored squeeze vector for the other.

    Only the surviving branch's feature stack is touched; the other branch is
    never evaluated. Returns the recalibrated features.
    """
    n = f_self.shape[0]
    c_self = params[f"{prefix}.e_{side}.b"].shape[0]
    other = "opt" if side == "sar" else "sar"
    c_other = params[f"{prefix}.e_{other}.b"].shape[0]
    if f_self.shape[1] != c_self:
        raise ShapeError(
            f"{prefix}: feature width {f_self.shape[1]} does not match parameter width {c_self}"
        )
    h_self = squeeze_batch(f_self)
    h_other = _as_batch(h_other, n, c_other, prefix)
    if side == "sar":
        h_cat = np.concatenate([h_self, h_other], axis=1)
    else:
        h_cat = np.concatenate([h_other, h_self], axis=1)
    _, gates = _excite(params, prefix, h_cat, (side,))
    return f_self * gates[side][:, :, None, None]


def _as_batch(vec, n, c, prefix):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim == 1:
        if vec.shape[0] != c:
            raise ShapeError(f"{prefix}: override vector has length {vec.shape[0]}, expected {c}")
        return np.broadcast_to(vec, (n, c))
    if vec.shape != (n, c):
        raise ShapeError(f"{prefix}: override batch has shape {vec.shape}, expected {(n, c)}")
    return vec


def mmtm_backward(params, prefix, cache, df_sar_t, df_opt_t, grads):
    """Backprop through one module; accumulates parameter grads, returns
    (df_sar, df_opt) w.r.t. the incoming features."""
    f_sar, f_opt = cache["f_sar"], cache["f_opt"]
    z, e_sar, e_opt = cache["z"], cache["e_sar"], cache["e_opt"]
    h_cat = cache["h_cat"]
    c1 = f_sar.shape[1]
    spatial_sar = f_sar.shape[2] * f_sar.shape[3]
    spatial_opt = f_opt.shape[2] * f_opt.shape[3]

    df_sar = df_sar_t * e_sar[:, :, None, None]
    df_opt = df_opt_t * e_opt[:, :, None, None]
    de_sar = (df_sar_t * f_sar).sum(axis=(2, 3))
    de_opt = (df_opt_t * f_opt).sum(axis=(2, 3))
    # d/du of 2*sigmoid(u) expressed through the gate value e = 2*sigmoid(u)
    dpre_sar = de_sar * e_sar * (1.0 - e_sar / 2.0)
    dpre_opt = de_opt * e_opt * (1.0 - e_opt / 2.0)

    dz_s, dw_es, db_es = layers.dense_backward(dpre_sar, z, params[f"{prefix}.e_sar.w"])
    dz_o, dw_eo, db_eo = layers.dense_backward(dpre_opt, z, params[f"{prefix}.e_opt.w"])
    _accum(grads, f"{prefix}.e_sar.w", dw_es)
    _accum(grads, f"{prefix}.e_sar.b", db_es)
    _accum(grads, f"{prefix}.e_opt.w", dw_eo)
    _accum(grads, f"{prefix}.e_opt.b", db_eo)

    dz = layers.relu_backward(dz_s + dz_o, z)
    dh_cat, dw_z, db_z = layers.dense_backward(dz, h_cat, params[f"{prefix}.z.w"])
    _accum(grads, f"{prefix}.z.w", dw_z)
    _accum(grads, f"{prefix}.z.b", db_z)

    if not cache["sar_overridden"]:
        df_sar = df_sar + dh_cat[:, :c1, None, None] / spatial_sar
    if not cache["opt_overridden"]:
        df_opt = df_opt + dh_cat[:, c1:, None, None] / spatial_opt
    return df_sar, df_opt


def _accum(grads, name, value):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


@dataclass
class HEntry:
    index: int
    n: int
    h_bar_sar: np.ndarray
    h_bar_opt: np.ndarray


@dataclass
class HStatistics:
    """Training-set mean squeeze vectors, one entry per fusion module."""

    entries: list = field(default_factory=list)

    def __post_init__(self):
        for e in self.entries:
            if e.n < 1:
                raise ConfigError(f"h-statistics entry {e.index} has sample count {e.n}")

    def entry(self, index: int) -> HEntry:
        for e in self.entries:
            if e.index == index:
                return e
        raise ConfigError(f"no h-statistics entry for module index {index}")

    def to_json(self) -> str:
        records = [
            {
                "index": e.index,
                "n": e.n,
                "h_bar_sar": [float(v) for v in e.h_bar_sar],
                "h_bar_opt": [float(v) for v in e.h_bar_opt],
            }
            for e in self.entries
        ]
        return json.dumps(records, indent=2) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "HStatistics":
        records = json.loads(text)
        return cls(
            entries=[
                HEntry(
                    index=int(r["index"]),
                    n=int(r["n"]),
                    h_bar_sar=np.asarray(r["h_bar_sar"], dtype=np.float64),
                    h_bar_opt=np.asarray(r["h_bar_opt"], dtype=np.float64),
                )
                for r in records
            ]
        )

    @classmethod
    def load(cls, path) -> "HStatistics":
        return cls.from_json(Path(path).read_text())
