"""Checkpoints: parameters, normaliser stats, optimiser moments and run metadata."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .model import PolicyModel
from .numerics import records
from .training import AdamWState, optimizer_arrays, optimizer_from_arrays

KIND = "checkpoint"


@dataclass
class Checkpoint:
    config: RunConfig
    model: PolicyModel
    stats: dict
    opt: AdamWState
    epoch: int
    meta: dict = field(default_factory=dict)

    @property
    def eval_history(self) -> list:
        return list(self.meta.get("eval_history", []))


def save(path, ck: Checkpoint) -> None:
    arrays = {f"param/{k}": v for k, v in ck.model.state_dict().items()}
    for group, st in ck.stats.items():
        arrays[f"stats/{group}/min"] = np.asarray(st["min"])
        arrays[f"stats/{group}/max"] = np.asarray(st["max"])
    arrays.update(optimizer_arrays(ck.opt))
    config = ck.config.to_dict()
    config.pop("out")  # location is not identity: equal (config, seed) runs must match byte for byte
    meta = dict(ck.meta, config=config, epoch=ck.epoch)
    records.save(path, KIND, meta, arrays)


def load(path) -> Checkpoint:
    meta, arrays = records.load(path, KIND)
    try:
        cfg = RunConfig.from_dict(meta.pop("config"))
        epoch = int(meta.pop("epoch"))
    except (KeyError, ValueError) as exc:
        raise records.RecordFormatError(f"{path}: bad checkpoint metadata ({exc})") from exc
    model = PolicyModel(cfg.model_config(), seed=cfg.seed)
    try:
        model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    except (KeyError, ValueError) as exc:
        raise records.RecordFormatError(f"{path}: parameters do not match the config ({exc})") from exc
    stats = {g: {"min": arrays[f"stats/{g}/min"], "max": arrays[f"stats/{g}/max"]} for g in ("action", "proprio")}
    opt = optimizer_from_arrays(arrays)
    return Checkpoint(cfg, model, stats, opt, epoch, meta)
