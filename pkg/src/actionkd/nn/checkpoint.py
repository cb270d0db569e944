"""Deterministic JSON serialization of named parameter tensors.

Floats are written with 17 significant digits, which round-trips IEEE-754
doubles exactly, so saving the same parameters twice yields byte-identical
files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]


def _format_float(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x}")
    return format(x, ".17g")


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    parts = [
        '{"format_version":%d,"config":%s,"params":{'
        % (FORMAT_VERSION, json.dumps(checkpoint.config, sort_keys=True))
    ]
    entries = []
    for name in sorted(checkpoint.params):
        values = np.asarray(checkpoint.params[name], dtype=np.float64)
        body = ",".join(_format_float(v) for v in values.reshape(-1))
        entries.append(
            '%s:{"shape":%s,"values":[%s]}'
            % (json.dumps(name), json.dumps(list(values.shape)), body)
        )
    parts.append(",".join(entries))
    parts.append("}}")
    Path(path).write_text("".join(parts), encoding="utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version}")
    params = {}
    for name, entry in raw["params"].items():
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    return Checkpoint(config=raw["config"], params=params)
