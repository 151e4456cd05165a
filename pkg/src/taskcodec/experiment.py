"""End-to-end desk-scale workflow used by the CLI and the acceptance suite."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .codec import MultiLevelCodec
from .core import Segment
from .data import to_arrays
from .tasks import ENVELOPE_SIGMA, ArrhythmiaClassifier, PeakLocator, envelopes_for
from .training import MetricsLog, TaskData, TrainConfig, train_phase1, train_phase2, train_phase3

log = logging.getLogger(__name__)


def task_data(segments: Sequence[Segment], sigma: float = ENVELOPE_SIGMA) -> tuple[TaskData, np.ndarray]:
    """``TaskData`` plus segment ids; envelopes only when every segment has peaks."""
    X, y, peaks, ids = to_arrays(segments)
    labels = y if np.all(y >= 0) else None
    env = envelopes_for(peaks, X.shape[1], sigma) if all(p is not None for p in peaks) else None
    return TaskData(X, labels, env), ids


def train_tasks(segments: Sequence[Segment], epochs: int = 30, seed: int = 0,
                task_ids=("hr_classify", "rr_peaks")) -> dict:
    """Fit the task models on raw training data and freeze them."""
    data, _ = task_data(segments)
    M = data.X.shape[1]
    tasks = {}
    if "hr_classify" in task_ids:
        if data.labels is None:
            raise ValueError("hr_classify needs labelled segments")
        tasks["hr_classify"] = ArrhythmiaClassifier(M=M, epochs=epochs, seed=seed).fit(data.X, data.labels).freeze()
    if "rr_peaks" in task_ids:
        if data.envelopes is None:
            raise ValueError("rr_peaks needs segments with peak positions")
        tasks["rr_peaks"] = PeakLocator(M=M, epochs=epochs, seed=seed).fit(data.X, data.envelopes).freeze()
    return tasks


@dataclass
class TrainedCodecs:
    final: MultiLevelCodec
    phase1: Optional[MultiLevelCodec] = None
    metrics: MetricsLog = field(default_factory=MetricsLog)


def train_codec(segments: Sequence[Segment], tasks: dict, cfg: TrainConfig = TrainConfig(),
                codec: Optional[MultiLevelCodec] = None, keep_phase1: bool = False) -> TrainedCodecs:
    """Run all three phases; optionally keep a copy of the reconstruction-only codec."""
    data, _ = task_data(segments)
    codec = codec if codec is not None else MultiLevelCodec(M=data.X.shape[1], seed=cfg.seed)
    codec.initialize()
    metrics = MetricsLog()
    train_phase1(codec, data.X, cfg, metrics)
    phase1 = copy.deepcopy(codec) if keep_phase1 else None
    train_phase2(codec, tasks, data, cfg, metrics)
    train_phase3(codec, tasks, data, cfg, metrics)
    return TrainedCodecs(codec, phase1, metrics)
