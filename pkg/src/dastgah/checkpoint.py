from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .model import BiLGNet, BiLGNetConfig, build_bilgnet
from .training import AdamState, EpochStats, PlateauScheduler, Standardizer, TrainState

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NAVM"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: BiLGNet
    state: Optional[TrainState] = None
    meta: Dict = field(default_factory=dict)


def _collect_arrays(model: BiLGNet, state: Optional[TrainState]) -> List[Tuple[str, np.ndarray]]:
    arrays = [(f"param/{k}", v) for k, v in model.named_parameters().items()]
    arrays += [(f"buffer/{k}", v) for k, v in model.named_buffers().items()]
    if state is not None:
        for k in model.named_parameters():
            if k in state.adam.m:
                arrays.append((f"adam_m/{k}", state.adam.m[k]))
                arrays.append((f"adam_v/{k}", state.adam.v[k]))
        if state.standardizer is not None:
            arrays.append(("standardizer/mean", state.standardizer.mean))
            arrays.append(("standardizer/std", state.standardizer.std))
    return arrays


def save_checkpoint(path: str | Path, model: BiLGNet, state: Optional[TrainState] = None, meta: Optional[Dict] = None) -> Path:
    """Write `NAVM` header, length-prefixed JSON config, then float32 arrays in declaration order."""
    arrays = _collect_arrays(model, state)
    header: Dict = {
        "model": model.cfg.to_dict(),
        "meta": meta or {},
        "batchnorm_updates": {name: bn.updates for name, bn in model.batchnorm_layers()},
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    if state is not None:
        header["train"] = {
            "epoch": state.epoch,
            "adam": {"beta1": state.adam.beta1, "beta2": state.adam.beta2, "epsilon": state.adam.epsilon, "t": state.adam.t},
            "scheduler": state.scheduler.to_dict(),
            "history": [s.to_dict() for s in state.history],
        }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_U32.pack(CHECKPOINT_VERSION))
        f.write(_U32.pack(len(blob)))
        f.write(blob)
        for _, a in arrays:
            data = np.ascontiguousarray(a, dtype="<f4")
            f.write(_U32.pack(data.size))
            f.write(data.tobytes())
    os.replace(tmp, p)
    log.debug("save_checkpoint path=%s arrays=%d", p, len(arrays))
    return p


class _Reader:
    def __init__(self, raw: bytes, path: Path) -> None:
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild a model (and training state when present); any inconsistency raises CheckpointError."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{p}: {exc.strerror or exc}") from exc
    r = _Reader(raw, p)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{p}: not a model checkpoint (magic {magic!r})")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{p}: checkpoint version {version} unsupported (reader is {CHECKPOINT_VERSION})")
    try:
        header = json.loads(r.take(r.u32("config length"), "config").decode("utf-8"))
        cfg = BiLGNetConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{p}: bad config block: {exc}") from None

    loaded: Dict[str, np.ndarray] = {}
    for spec in header.get("arrays", []):
        name, shape = spec["name"], tuple(spec["shape"])
        count = r.u32(f"{name} length")
        if count != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{p}: {name} holds {count} values, shape {shape} needs {int(np.prod(shape))}")
        data = r.take(4 * count, name)
        loaded[name] = np.frombuffer(data, dtype="<f4").reshape(shape)
    if r.pos != len(raw):
        raise CheckpointError(f"{p}: {len(raw) - r.pos} unexpected trailing bytes")

    model = build_bilgnet(cfg)
    targets = {f"param/{k}": v for k, v in model.named_parameters().items()}
    targets.update({f"buffer/{k}": v for k, v in model.named_buffers().items()})
    for name, target in targets.items():
        if name not in loaded:
            raise CheckpointError(f"{p}: missing array {name}")
        if loaded[name].shape != target.shape:
            raise CheckpointError(f"{p}: {name} has shape {loaded[name].shape}, model expects {target.shape}")
        target[...] = loaded[name]
    updates = header.get("batchnorm_updates", {})
    for name, bn in model.batchnorm_layers():
        bn.updates = int(updates.get(name, 0))

    state = None
    if "train" in header:
        t = header["train"]
        adam = AdamState(**t["adam"])
        for k in model.named_parameters():
            if f"adam_m/{k}" in loaded:
                adam.m[k] = loaded[f"adam_m/{k}"].astype(model.dtype)
                adam.v[k] = loaded[f"adam_v/{k}"].astype(model.dtype)
        standardizer = None
        if "standardizer/mean" in loaded:
            standardizer = Standardizer(mean=loaded["standardizer/mean"].copy(), std=loaded["standardizer/std"].copy())
        state = TrainState(
            epoch=int(t["epoch"]),
            adam=adam,
            scheduler=PlateauScheduler.from_dict(t["scheduler"]),
            standardizer=standardizer,
            history=[EpochStats(**s) for s in t.get("history", [])],
        )
    log.debug("load_checkpoint path=%s params=%d", p, model.parameter_count())
    return Checkpoint(model=model, state=state, meta=header.get("meta", {}))
