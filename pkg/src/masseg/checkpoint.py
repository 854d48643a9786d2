"""Checkpoints: a text manifest plus one little-endian float32 blob per parameter.

Layout::

    <dir>/manifest.txt   [checkpoint] config_hash, step; [params] name = d0,d1,...
    <dir>/config.ini     the run configuration the model was built from
    <dir>/params/<name>.f32
"""

from __future__ import annotations

import configparser
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import read_tensor, write_tensor
from .model import SegModel


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SegModel, config: RunConfig, step: int) -> Path:
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["checkpoint"] = {"config_hash": config.model_hash(), "step": str(step), "dtype": "<f4"}
    cp["params"] = {}
    for name, p in model.parameters().items():
        # the live model adopts storage precision so it matches what reloads
        p.data[...] = p.data.astype(np.float32)
        cp["params"][name] = ",".join(map(str, p.shape))
        write_tensor(root / "params" / f"{name}.f32", p.data)
    with open(root / "manifest.txt", "w") as fh:
        cp.write(fh)
    config.save(root / "config.ini")
    return root


def load_checkpoint(path, expect: RunConfig | None = None) -> tuple[SegModel, RunConfig, int]:
    """Rebuild the model from its stored config and fill in the saved weights.

    With ``expect`` given, its model hash must match the checkpoint's.
    """
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read(manifest)
    stored_hash = cp["checkpoint"]["config_hash"]
    config = RunConfig.load(root / "config.ini")
    if config.model_hash() != stored_hash:
        raise CheckpointError("checkpoint config.ini does not match its manifest hash")
    if expect is not None and expect.model_hash() != stored_hash:
        raise CheckpointError("checkpoint was built with a different model/variant configuration")
    model = SegModel(config.model_config(), config.variant(), seed=config.seed)
    registry = model.parameters()
    stored = {k: tuple(int(x) for x in v.split(",") if x) for k, v in cp["params"].items()}
    if set(stored) != set(registry):
        raise CheckpointError("parameter registry mismatch between checkpoint and model")
    for name, p in registry.items():
        if stored[name] != p.shape:
            raise CheckpointError(f"parameter {name} has shape {stored[name]}, model expects {p.shape}")
        p.data[...] = read_tensor(root / "params" / f"{name}.f32", p.shape)
    return model, config, int(cp["checkpoint"]["step"])
