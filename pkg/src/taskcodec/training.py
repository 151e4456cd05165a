"""Losses and the three-phase codec training procedure.

Phase 1 fits the codec for reconstruction alone. Phase 2 fine-tunes it on the
combined objective with gradients flowing through frozen task models. Phase 3
fits only the error-predictor heads to the measured weighted task error.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

from . import _torch
from .codec import MultiLevelCodec, PhaseOrderError
from .core import BoundConfig
from .tasks import FrozenModelError

log = logging.getLogger(__name__)

RECON_EPS = 1e-3
LOG_FIELDS = ("phase", "epoch", "cg", "L_R", "L_w", "L_c", "predictor_mse")


# -- losses -----------------------------------------------------------------


def reconstruction_loss(x, x_hat, eps: float = RECON_EPS):
    """Mean relative absolute error in percent; denominators floor at ``eps``.

    Works on numpy arrays or torch tensors; batched inputs reduce over the
    last axis only.
    """
    if isinstance(x, torch.Tensor):
        if x.shape != x_hat.shape:
            raise ValueError(f"length mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
        return ((x - x_hat).abs() / x.abs().clamp_min(eps)).mean(dim=-1) * 100.0
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {x_hat.shape}")
    out = (np.abs(x - x_hat) / np.maximum(np.abs(x), eps)).mean(axis=-1) * 100.0
    return float(out) if np.ndim(out) == 0 else out


def weighted_task_loss(losses: Mapping[str, float], weights: Mapping[str, float]):
    """Sum of ``weights[t] * losses[t]`` over the tasks present in ``losses``."""
    missing = set(losses) - set(weights)
    if missing:
        raise KeyError(f"no weight for task(s) {sorted(missing)}")
    total = 0.0
    for task, value in losses.items():
        total = total + weights[task] * value
    return total


def combined_loss(L_R, L_w, w0: float):
    return w0 * L_R + L_w


def correlation_report(pairs) -> float:
    """Pearson correlation between per-segment reconstruction and task errors."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 3:
        raise ValueError("need at least 3 (L_R, L_w) pairs")
    if np.ptp(arr[:, 0]) == 0 or np.ptp(arr[:, 1]) == 0:
        raise ValueError("correlation undefined: zero variance in one coordinate")
    return float(np.clip(np.corrcoef(arr[:, 0], arr[:, 1])[0, 1], -1.0, 1.0))


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    lr_decay: float = 1e-5
    batch_size: int = 32
    epochs_phase1: int = 30
    epochs_phase2: int = 20
    epochs_phase3: int = 10
    seed: int = 0
    weights: BoundConfig = field(default_factory=BoundConfig)

    def __post_init__(self):
        if min(self.epochs_phase1, self.epochs_phase2, self.epochs_phase3) <= 0:
            raise ValueError("epoch counts must be positive")

    @property
    def optim(self) -> _torch.OptimConfig:
        return _torch.OptimConfig(self.learning_rate, self.adam_beta1, self.adam_beta2, self.lr_decay,
                                  self.batch_size)


@dataclass
class TaskData:
    """Training targets: labels for the classifier, envelopes for the peak task."""

    X: np.ndarray
    labels: np.ndarray | None = None
    envelopes: np.ndarray | None = None

    def targets(self, idx=None):
        sel = slice(None) if idx is None else idx
        out = {}
        if self.labels is not None:
            out["hr_classify"] = torch.as_tensor(np.asarray(self.labels)[sel], dtype=torch.long)
        if self.envelopes is not None:
            out["rr_peaks"] = torch.as_tensor(np.asarray(self.envelopes)[sel])
        return out


class MetricsLog:
    """Per-epoch, per-level training metrics; writes CSV."""

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, **row):
        self.rows.append({k: row.get(k, "") for k in LOG_FIELDS})

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            w.writerows(self.rows)


def _compressed_gains(codec: MultiLevelCodec) -> list[int]:
    return [lv.cg for lv in codec.level_specs_ if not lv.is_identity]


def _set_trainable(codec: MultiLevelCodec, groups) -> list:
    params = []
    for g, items in codec.parameter_groups().items():
        for _, p in items:
            p.requires_grad_(g in groups)
            if g in groups:
                params.append(p)
    return params


def _check_finite(loss: torch.Tensor, phase: int):
    if not torch.isfinite(loss):
        raise FloatingPointError(f"phase {phase}: non-finite loss, aborting")


def _check_tasks_frozen(tasks: Mapping):
    if not tasks:
        raise ValueError("at least one task model is required")
    for tid, model in tasks.items():
        if not getattr(model, "frozen_", False):
            raise FrozenModelError(f"task model {tid!r} must be frozen before codec fine-tuning")


def _task_losses_tensor(tasks, x_hat, targets) -> dict[str, torch.Tensor]:
    out = {}
    for tid, model in tasks.items():
        if tid not in targets:
            raise ValueError(f"missing ground truth for task {tid!r}")
        out[tid] = model.torch_loss(x_hat, targets[tid])
    return out


def codec_objective(codec, tasks, x, targets, task_weights: Mapping[str, float], w0: float,
                    use_tasks: bool = True):
    """Combined loss summed over non-identity levels, averaged over the batch.

    With ``use_tasks=False`` this is the reconstruction-only objective. Returns ``(total, per_level)`` where ``per_level[cg] = (L_R, L_w, L_c)``.
    """
    h = codec._trunk(x)
    total = x.new_zeros(())
    per_level = {}
    for cg in _compressed_gains(codec):
        x_hat = codec.reconstruct_tensor(x, cg, trunk_out=h)
        L_R = reconstruction_loss(x, x_hat).mean()
        if use_tasks:
            tl = {k: v.mean() for k, v in _task_losses_tensor(tasks, x_hat, targets).items()}
            L_w = weighted_task_loss(tl, task_weights)
        else:
            L_w = x.new_zeros(())
        L_c = combined_loss(L_R, L_w, w0) if use_tasks else L_R
        per_level[cg] = (L_R, L_w, L_c)
        total = total + L_c
    return total, per_level


def _run_epochs(codec, params, epochs, phase, X, data, tasks, cfg, use_tasks, log_):
    opt, sched = _torch.make_optimizer(params, cfg.optim)
    rng = np.random.default_rng(cfg.seed + phase)
    Xt = _torch.as_tensor(X, codec.dtype)
    codec.net_.train()
    try:
        for epoch in range(epochs):
            sums: dict[int, np.ndarray] = {}
            for idx in _torch.batches(len(Xt), cfg.batch_size, rng):
                targets = data.targets(idx) if data is not None else {}
                if "rr_peaks" in targets:
                    targets["rr_peaks"] = targets["rr_peaks"].to(codec.dtype)
                opt.zero_grad()
                loss, per_level = codec_objective(codec, tasks, Xt[idx], targets, cfg.weights.task_weights,
                                                   cfg.weights.reconstruction_weight, use_tasks)
                _check_finite(loss, phase)
                loss.backward()
                opt.step()
                sched.step()
                for cg, vals in per_level.items():
                    sums.setdefault(cg, np.zeros(3))
                    sums[cg] += np.array([float(v.detach()) for v in vals]) * len(idx)
            for cg, s in sums.items():
                L_R, L_w, L_c = s / len(Xt)
                log_.add(phase=phase, epoch=epoch, cg=cg, L_R=L_R, L_w=L_w if use_tasks else "", L_c=L_c)
            log.info("phase %d epoch %d: %s", phase, epoch,
                     {cg: round(float(s[2] / len(Xt)), 4) for cg, s in sums.items()})
    finally:
        codec.net_.eval()
        _set_trainable(codec, ())


def train_phase1(codec: MultiLevelCodec, X, cfg: TrainConfig = TrainConfig(), log_: MetricsLog | None = None):
    """Reconstruction-only training of trunk, heads, decoder and adapters."""
    if not hasattr(codec, "net_"):
        codec.initialize()
    log_ = log_ if log_ is not None else MetricsLog()
    X = np.asarray(X, dtype=np.float64)
    before = codec.checksum(("predictors",))
    params = _set_trainable(codec, ("trunk", "heads", "decoder", "adapters"))
    _run_epochs(codec, params, cfg.epochs_phase1, 1, X, None, {}, cfg, False, log_)
    if codec.checksum(("predictors",)) != before:
        raise AssertionError("phase 1 modified predictor parameters")
    codec.phase_ = 1
    codec.metrics_ = log_
    return codec


def train_phase2(codec: MultiLevelCodec, tasks: Mapping, data: TaskData, cfg: TrainConfig = TrainConfig(),
                 log_: MetricsLog | None = None):
    """Task-aware fine-tuning through frozen task models."""
    if getattr(codec, "phase_", 0) < 1:
        raise PhaseOrderError("phase 2 requires a phase-1 trained codec")
    _check_tasks_frozen(tasks)
    log_ = log_ if log_ is not None else MetricsLog()
    sums_before = {tid: m.checksum() for tid, m in tasks.items()}
    before = codec.checksum(("predictors",))
    params = _set_trainable(codec, ("trunk", "heads", "decoder", "adapters"))
    _run_epochs(codec, params, cfg.epochs_phase2, 2, data.X, data, tasks, cfg, True, log_)
    for tid, m in tasks.items():
        if m.checksum() != sums_before[tid]:
            raise AssertionError(f"frozen task {tid!r} changed during phase 2")
    if codec.checksum(("predictors",)) != before:
        raise AssertionError("phase 2 modified predictor parameters")
    codec.phase_ = 2
    codec.metrics_ = log_
    return codec


def measured_task_losses(codec: MultiLevelCodec, tasks: Mapping, data: TaskData, cg: int) -> dict[str, np.ndarray]:
    """Per-segment task losses of the level-``cg`` reconstruction (CCE log-clamped)."""
    X_hat = codec.reconstruct(data.X, cg)
    out = {}
    for tid, model in tasks.items():
        if tid == "hr_classify":
            if data.labels is None:
                raise ValueError("missing ground truth for task 'hr_classify'")
            out[tid] = model.loss_per_segment(X_hat, data.labels)
        elif tid == "rr_peaks":
            if data.envelopes is None:
                raise ValueError("missing ground truth for task 'rr_peaks'")
            out[tid] = model.loss_per_segment(X_hat, data.envelopes)
        else:
            raise ValueError(f"unknown task {tid!r}")
    return out


def measured_weighted_loss(codec, tasks, data: TaskData, cg: int, weights: BoundConfig) -> np.ndarray:
    return np.asarray(weighted_task_loss(measured_task_losses(codec, tasks, data, cg), weights.task_weights))


def train_phase3(codec: MultiLevelCodec, tasks: Mapping, data: TaskData, cfg: TrainConfig = TrainConfig(),
                 log_: MetricsLog | None = None):
    """Fit the error predictors to measured weighted task error; everything else frozen."""
    if getattr(codec, "phase_", 0) < 2:
        raise PhaseOrderError("phase 3 requires a phase-2 trained codec")
    _check_tasks_frozen(tasks)
    log_ = log_ if log_ is not None else MetricsLog()
    frozen_groups = ("trunk", "heads", "decoder", "adapters")
    before = codec.checksum(frozen_groups)
    gains = _compressed_gains(codec)
    Xt = _torch.as_tensor(data.X, codec.dtype)

    # compressor is frozen, so pooled features and targets are fixed
    feats, targets = {}, {}
    with torch.no_grad():
        h = codec._trunk(Xt)
        for cg in gains:
            _, f = codec.forward_level(Xt, cg, trunk_out=h)
            feats[cg] = f
            targets[cg] = torch.as_tensor(measured_weighted_loss(codec, tasks, data, cg, cfg.weights), dtype=codec.dtype)

    params = _set_trainable(codec, ("predictors",))
    for cg in gains:
        head = codec.net_.predictors[str(cg)]
        with torch.no_grad():
            pooled = feats[cg].mean(dim=-1)
            head.feat_mean.copy_(pooled.mean(dim=0))
            head.feat_scale.copy_(pooled.std(dim=0, correction=0).clamp_min(1e-6))
            head.output_layer.bias.fill_(float(targets[cg].mean()))
    opt, sched = _torch.make_optimizer(params, cfg.optim)
    rng = np.random.default_rng(cfg.seed + 3)
    try:
        for epoch in range(cfg.epochs_phase3):
            sums = {cg: 0.0 for cg in gains}
            for idx in _torch.batches(len(Xt), cfg.batch_size, rng):
                opt.zero_grad()
                loss = Xt.new_zeros(())
                for cg in gains:
                    # fit the pre-activation: for nonnegative targets this bounds the clamped MSE and never stalls
                    pred = codec.net_.predictors[str(cg)].pre_activation(feats[cg][idx])
                    mse = ((pred - targets[cg][idx]) ** 2).mean()
                    sums[cg] += float(mse.detach()) * len(idx)
                    loss = loss + mse
                _check_finite(loss, 3)
                loss.backward()
                opt.step()
                sched.step()
            for cg in gains:
                log_.add(phase=3, epoch=epoch, cg=cg, predictor_mse=sums[cg] / len(Xt))
    finally:
        _set_trainable(codec, ())
    if codec.checksum(frozen_groups) != before:
        raise AssertionError("phase 3 modified non-predictor parameters")
    codec.phase_ = 3
    codec.metrics_ = log_
    return codec
