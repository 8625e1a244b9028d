"""Paired-modality tiles: synthetic scene generation, on-disk format, augmentation.

Dataset directory layout:

    manifest.json
    tiles/<id>.sar.bin   float32, little-endian, C-order [C_s, H, W]
    tiles/<id>.opt.bin   float32, little-endian, C-order [C_o, H, W]
    tiles/<id>.y.bin     uint8 [1, H, W], values {0, 1}

The generator is a pure function of its config: equal (config, seed)
produces byte-identical datasets.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from dualseg.errors import ConfigError, DatasetError, ShapeError, UnknownIdError

MANIFEST_NAME = "manifest.json"
TILE_DIR = "tiles"

# Labels are smoothed-noise blobs thresholded at a per-tile quantile. The
# per-tile urban fraction is jittered around the configured target (relative
# half-width below) so tile-level statistics vary from scene to scene; the
# dataset-level mean stays at the target.
FRACTION_JITTER = 0.5


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic paired-modality scene generator.

    informativeness_* is the per-tile probability that the modality renders
    the label mask; otherwise the raster is noise uncorrelated with it.
    """

    n_train: int = 64
    n_val: int = 8
    n_test: int = 32
    height: int = 64
    width: int = 64
    c_sar: int = 2
    c_opt: int = 4
    target_urban_fraction: float = 0.3
    informativeness_sar: float = 1.0
    informativeness_opt: float = 1.0
    speckle_strength: float = 0.5
    additive_noise_std: float = 0.05
    seed: int = 0

    def validate(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("height", "width", "c_sar", "c_opt"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.target_urban_fraction < 1.0:
            raise ConfigError(
                f"target_urban_fraction must lie in (0,1), got {self.target_urban_fraction}"
            )
        for name in ("informativeness_sar", "informativeness_opt"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0,1], got {v}")
        for name in ("speckle_strength", "additive_noise_std"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")


@dataclass
class Tile:
    """One paired sample: SAR-like and optical-like rasters plus a binary label."""

    id: str
    x_sar: np.ndarray  # [C_s, H, W] float
    x_opt: np.ndarray  # [C_o, H, W] float
    y: np.ndarray  # [1, H, W] uint8, values {0, 1}


@dataclass
class DatasetManifest:
    root: Path
    splits: dict  # split name -> list of tile ids
    c_sar: int
    c_opt: int
    height: int
    width: int
    provenance: dict = field(default_factory=dict)

    def ids(self, split: str) -> list:
        if split not in self.splits:
            raise DatasetError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return list(self.splits[split])

    def all_ids(self) -> list:
        out = []
        for split in self.splits.values():
            out.extend(split)
        return out

    def validate(self):
        seen = {}
        for name, ids in self.splits.items():
            for tid in ids:
                if tid in seen:
                    raise DatasetError(
                        f"tile id {tid!r} appears in splits {seen[tid]!r} and {name!r}"
                    )
                seen[tid] = name
        tile_dir = self.root / TILE_DIR
        for tid in seen:
            for suffix in (".sar.bin", ".opt.bin", ".y.bin"):
                if not (tile_dir / f"{tid}{suffix}").is_file():
                    raise DatasetError(f"tile {tid!r} is listed but {tid}{suffix} is missing")


def save_manifest(manifest: DatasetManifest):
    doc = {
        "splits": {k: list(v) for k, v in manifest.splits.items()},
        "channels": {"sar": manifest.c_sar, "opt": manifest.c_opt},
        "height": manifest.height,
        "width": manifest.width,
        "provenance": manifest.provenance,
    }
    path = manifest.root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {path}: {e}") from e
    try:
        manifest = DatasetManifest(
            root=root,
            splits=doc["splits"],
            c_sar=int(doc["channels"]["sar"]),
            c_opt=int(doc["channels"]["opt"]),
            height=int(doc["height"]),
            width=int(doc["width"]),
            provenance=doc.get("provenance", {}),
        )
    except (KeyError, TypeError) as e:
        raise DatasetError(f"manifest {path} is missing required keys: {e}") from e
    manifest.validate()
    return manifest


def _read_raster(path: Path, shape, dtype) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing tile file {path}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise ShapeError(
            f"{path} holds {len(raw)} bytes, expected {expected} for shape {tuple(shape)}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def load_tile(manifest: DatasetManifest, tile_id: str) -> Tile:
    """Load one tile; raises UnknownIdError if the id is not in the manifest."""
    known = set(manifest.all_ids())
    if tile_id not in known:
        raise UnknownIdError(f"unknown tile id {tile_id!r}")
    tile_dir = manifest.root / TILE_DIR
    h, w = manifest.height, manifest.width
    x_sar = _read_raster(tile_dir / f"{tile_id}.sar.bin", (manifest.c_sar, h, w), "<f4")
    x_opt = _read_raster(tile_dir / f"{tile_id}.opt.bin", (manifest.c_opt, h, w), "<f4")
    y = _read_raster(tile_dir / f"{tile_id}.y.bin", (1, h, w), "u1")
    if not np.isfinite(x_sar).all() or not np.isfinite(x_opt).all():
        raise DatasetError(f"tile {tile_id!r} contains non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise DatasetError(f"tile {tile_id!r} label contains values outside {{0,1}}")
    return Tile(id=tile_id, x_sar=x_sar, x_opt=x_opt, y=y)


def store_tile(root, tile: Tile):
    tile_dir = Path(root) / TILE_DIR
    tile_dir.mkdir(parents=True, exist_ok=True)
    (tile_dir / f"{tile.id}.sar.bin").write_bytes(
        np.ascontiguousarray(tile.x_sar, dtype="<f4").tobytes()
    )
    (tile_dir / f"{tile.id}.opt.bin").write_bytes(
        np.ascontiguousarray(tile.x_opt, dtype="<f4").tobytes()
    )
    (tile_dir / f"{tile.id}.y.bin").write_bytes(
        np.ascontiguousarray(tile.y, dtype="u1").tobytes()
    )


def _blob_mask(rng: np.random.Generator, h: int, w: int, fraction: float) -> np.ndarray:
    """Smooth random blobs covering approximately `fraction` of the tile."""
    noise = rng.standard_normal((h, w))
    smooth = gaussian_filter(noise, sigma=min(h, w) / 8.0)
    threshold = np.quantile(smooth, 1.0 - fraction)
    return (smooth > threshold).astype(np.uint8)


def _render_sar(rng, cfg: SyntheticConfig, mask, informative: bool) -> np.ndarray:
    shape = (cfg.c_sar, cfg.height, cfg.width)
    if informative:
        base = np.where(mask[None] == 1, 0.8, 0.2) * np.ones(shape)
    else:
        base = np.full(shape, 0.5)
    if cfg.speckle_strength > 0:
        # unit-mean gamma speckle with std = speckle_strength
        k = 1.0 / cfg.speckle_strength**2
        base = base * rng.gamma(k, 1.0 / k, size=shape)
    return base


def _render_opt(rng, cfg: SyntheticConfig, mask, informative: bool) -> np.ndarray:
    shape = (cfg.c_opt, cfg.height, cfg.width)
    if informative:
        mu_in = rng.uniform(0.55, 0.9, size=cfg.c_opt)
        mu_out = rng.uniform(0.1, 0.45, size=cfg.c_opt)
        base = mu_out[:, None, None] + (mu_in - mu_out)[:, None, None] * mask[None]
    else:
        mu = rng.uniform(0.1, 0.9, size=cfg.c_opt)
        base = np.broadcast_to(mu[:, None, None], shape).copy()
    if cfg.additive_noise_std > 0:
        base = base + rng.normal(0.0, cfg.additive_noise_std, size=shape)
    return np.clip(base, 0.0, None)


def generate_synthetic_dataset(cfg: SyntheticConfig, out_dir) -> DatasetManifest:
    """Generate and store a full synthetic dataset; returns its manifest."""
    cfg.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {out_dir}: {e}") from e

    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    splits = {
        split: [f"{split}_{i:04d}" for i in range(n)] for split, n in counts.items()
    }
    n_total = sum(counts.values())
    children = np.random.SeedSequence(cfg.seed).spawn(n_total)

    lo = cfg.target_urban_fraction * (1.0 - FRACTION_JITTER)
    hi = cfg.target_urban_fraction * (1.0 + FRACTION_JITTER)

    i = 0
    for split in ("train", "val", "test"):
        for tid in splits[split]:
            rng = np.random.default_rng(children[i])
            i += 1
            fraction = float(np.clip(rng.uniform(lo, hi), 0.02, 0.98))
            mask = _blob_mask(rng, cfg.height, cfg.width, fraction)
            sar_informative = rng.random() < cfg.informativeness_sar
            opt_informative = rng.random() < cfg.informativeness_opt
            x_sar = _render_sar(rng, cfg, mask, sar_informative)
            x_opt = _render_opt(rng, cfg, mask, opt_informative)
            store_tile(out_dir, Tile(id=tid, x_sar=x_sar, x_opt=x_opt, y=mask[None]))

    manifest = DatasetManifest(
        root=out_dir,
        splits=splits,
        c_sar=cfg.c_sar,
        c_opt=cfg.c_opt,
        height=cfg.height,
        width=cfg.width,
        provenance={
            "generator": "dualseg-synthetic-v1",
            "seed": cfg.seed,
            "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
            "fraction_jitter": FRACTION_JITTER,
        },
    )
    save_manifest(manifest)
    return manifest


@dataclass(frozen=True)
class AugmentDraw:
    """One sampled geometric transform: optional flips plus a k*90 deg rotation."""

    flip_h: bool
    flip_v: bool
    rot_k: int

    def __post_init__(self):
        if self.rot_k not in (0, 1, 2, 3):
            raise ConfigError(f"rot_k must be in {{0,1,2,3}}, got {self.rot_k}")


def random_augment_draw(rng: np.random.Generator) -> AugmentDraw:
    return AugmentDraw(
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        rot_k=int(rng.integers(0, 4)),
    )


def apply_geometric(raster: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Apply the transform to one [C, H, W] raster (H/W axes only)."""
    out = raster
    if draw.flip_h:
        out = np.flip(out, axis=2)
    if draw.flip_v:
        out = np.flip(out, axis=1)
    if draw.rot_k:
        out = np.rot90(out, k=draw.rot_k, axes=(1, 2))
    return np.ascontiguousarray(out)


def augment(tile: Tile, draw: AugmentDraw) -> Tile:
    """Apply the same flips/rotation to both modalities and the label."""
    return Tile(
        id=tile.id,
        x_sar=apply_geometric(tile.x_sar, draw),
        x_opt=apply_geometric(tile.x_opt, draw),
        y=apply_geometric(tile.y, draw),
    )
