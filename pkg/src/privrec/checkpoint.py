"""Versioned model checkpoints: named parameter arrays plus JSON metadata in one .npz."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from . import models

CHECKPOINT_FORMAT = "privrec-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: models.Recommender, path: str | Path, ledger: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "num_users": model.num_users,
        "num_items": model.num_items,
        "seed": model.seed,
        "dims": {k: list(v) if isinstance(v, tuple) else v for k, v in model.dims.items()},
        "ledger": ledger,
    }
    arrays = {f"param/{name}": v for name, v in model.params.items()}
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp.npz")
    np.savez(tmp, __meta__=np.array(json.dumps(meta)), **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[models.Recommender, dict]:
    """Rebuild the model; raises ValueError on a foreign or newer format."""
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        model = models.init(meta["kind"], meta["num_users"], meta["num_items"], meta["seed"], **meta["dims"])
        for name in model.params:
            model.params[name][...] = data[f"param/{name}"]
    return model, meta
