"""Torch plumbing shared by the codec and the task models."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

ARCHIVE_FORMAT = "taskcodec-archive-v1"


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    lr_decay: float = 1e-5
    batch_size: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lr_decay < 0 or self.batch_size <= 0:
            raise ValueError("learning_rate and batch_size must be positive, lr_decay nonnegative")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


def make_optimizer(params, cfg: OptimConfig):
    """Adam with Keras-style time decay: ``lr / (1 + decay * step)``."""
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: 1.0 / (1.0 + cfg.lr_decay * step))
    return opt, sched


def batches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def as_tensor(X, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(X)
    if not arr.flags.writeable:  # segments hold read-only views
        arr = arr.copy()
    return torch.as_tensor(arr, dtype=dtype)


def module_dtype(module: torch.nn.Module) -> torch.dtype:
    for p in module.parameters():
        return p.dtype
    return torch.float32


def checksum(tensors) -> str:
    """SHA-256 over the raw bytes of ``tensors`` (an iterable of (name, tensor))."""
    h = hashlib.sha256()
    for name, t in tensors:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_archive(path, kind: str, config: dict, state: dict, extra: dict | None = None) -> None:
    payload = {
        "format": ARCHIVE_FORMAT,
        "kind": kind,
        "config": json.dumps(config, sort_keys=True),
        "state": {k: v.detach().cpu().clone() for k, v in state.items()},
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_archive(path, kind: str | None = None):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != ARCHIVE_FORMAT:
        raise ValueError(f"{path}: not a taskcodec archive")
    if kind is not None and payload["kind"] != kind:
        raise ValueError(f"{path}: expected a {kind!r} archive, found {payload['kind']!r}")
    return json.loads(payload["config"]), payload["state"], json.loads(payload["extra"])
