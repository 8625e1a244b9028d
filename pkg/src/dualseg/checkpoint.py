"""Checkpoint archive: one npz mapping parameter names to arrays.

The model config rides along as a JSON header under a reserved key, so a
checkpoint is self-describing. Entries are written in sorted name order,
which makes the archive byte-reproducible for identical parameters.
"""

import json
from pathlib import Path

import numpy as np

from dualseg.dual import DualModel, DualModelConfig
from dualseg.errors import DatasetError

_CONFIG_KEY = "__config_json__"


def save_checkpoint(path, model: DualModel):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"format": "dualseg-checkpoint-v1", "model": model.config.to_dict()})
    arrays = {_CONFIG_KEY: np.frombuffer(header.encode("utf-8"), dtype=np.uint8)}
    for name in sorted(model.params):
        arrays[name] = model.params[name]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> DualModel:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"checkpoint {path} does not exist")
    with np.load(path) as archive:
        if _CONFIG_KEY not in archive:
            raise DatasetError(f"{path} is not a dualseg checkpoint (missing config header)")
        header = json.loads(bytes(archive[_CONFIG_KEY]).decode("utf-8"))
        config = DualModelConfig.from_dict(header["model"])
        params = {
            name: np.asarray(archive[name], dtype=np.float64)
            for name in archive.files
            if name != _CONFIG_KEY
        }
    model = DualModel(config=config, params=params)
    _check_complete(model)
    return model


def _check_complete(model: DualModel):
    from dualseg.dual import initialize

    expected = set(initialize(model.config).params)
    have = set(model.params)
    if expected != have:
        missing = sorted(expected - have)[:5]
        extra = sorted(have - expected)[:5]
        raise DatasetError(
            f"checkpoint parameter names do not match the config (missing {missing}, extra {extra})"
        )
