"""Model checkpoints as versioned JSON documents.

Floats are written with ``repr`` precision, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .features import NormStats
from .gnn import GnnParams, param_shapes
from .sim_env import RewardConfig

FORMAT = "oran-cm-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: GnnParams
    norm: NormStats
    reward: RewardConfig = field(default_factory=RewardConfig)
    train_config: dict = field(default_factory=dict)
    defense: Optional[dict] = None  # {"kind": ..., "config": {...}} for defended models

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "dims": {"d": self.params.d, "L": self.params.L},
            "params": {k: v.tolist() for k, v in self.params.arrays.items()},
            "norm": {k: getattr(self.norm, k).tolist() for k in ("c_min", "c_max", "u_min", "u_max")},
            "reward": asdict(self.reward),
            "train_config": self.train_config,
            "defense": self.defense,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Checkpoint":
        if not isinstance(doc, dict) or doc.get("format") != FORMAT:
            raise CheckpointError("not a checkpoint document")
        if doc.get("version") != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
        try:
            d, L = int(doc["dims"]["d"]), int(doc["dims"]["L"])
            shapes = param_shapes(d, L)
            raw = doc["params"]
            if set(raw) != set(shapes):
                raise CheckpointError("parameter names do not match the dims header")
            arrays = {}
            for name, shape in shapes.items():
                a = np.array(raw[name], dtype=float)
                if a.shape != shape:
                    raise CheckpointError(f"{name}: shape {a.shape} does not match dims header {shape}")
                arrays[name] = a
            norm = NormStats(*(np.array(doc["norm"][k], dtype=float) for k in ("c_min", "c_max", "u_min", "u_max")))
            if norm.c_min.shape != (4,) or norm.u_min.shape != (2,):
                raise CheckpointError("malformed normalization block")
            reward = RewardConfig(**doc["reward"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc
        return cls(GnnParams(arrays, d, L), norm, reward, doc.get("train_config") or {}, doc.get("defense"))


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(ckpt.to_dict(), indent=1))
    return path


def load(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint file {path}: {exc}") from exc
    return Checkpoint.from_dict(doc)
