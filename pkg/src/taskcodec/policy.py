"""Compression-level selection: the on-device predictive policy and feedback oracles.

The dynamic policy only sees the codec's predicted errors. The oracles see the
measured task error of every level, which in deployment would require cloud
feedback; they bound what the dynamic policy can reach.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .codec import MultiLevelCodec
from .core import BoundConfig, LevelSpec, Segment, average_cg
from .evaluation import EvalReport, cce_quartiles, classification_metrics, violation_rate
from .tasks import envelopes_for
from .training import TaskData, measured_task_losses, weighted_task_loss

POLICIES = ("dynamic", "oracle2", "oracle3")


@dataclass(frozen=True)
class SelectionResult:
    segment_id: Optional[int]
    chosen: LevelSpec
    fallback_used: bool
    predicted_error: Optional[float] = None
    measured_error: Optional[dict] = None


def _identity(levels: Sequence[LevelSpec]) -> LevelSpec:
    for lv in levels:
        if lv.is_identity:
            return lv
    raise ValueError("missing identity level")


def _pick(levels: Sequence[LevelSpec], errors: Mapping[int, float], bound: float) -> tuple[LevelSpec, bool]:
    for lv in sorted(levels, key=lambda lv: -lv.cg):
        if not lv.is_identity and errors[lv.cg] <= bound:
            return lv, False
    return _identity(levels), True


def select_dynamic(per_level, bound: float, levels: Sequence[LevelSpec] | None = None,
                   segment_id: int | None = None) -> SelectionResult:
    """Highest-gain level whose predicted error is within ``bound``; identity otherwise."""
    if bound < 0:
        raise ValueError("bound must be >= 0")
    preds = {lv.cg: float(err) for lv, err in per_level}
    given = [lv for lv, _ in per_level]
    wanted = list(levels) if levels is not None else given
    for lv in wanted:
        if lv.cg not in preds:
            raise ValueError(f"missing level cg={lv.cg} in predictions")
    chosen, fallback = _pick(wanted, preds, bound)
    return SelectionResult(segment_id, chosen, fallback, predicted_error=preds[chosen.cg])


def choose_by_measured(measured: Mapping[int, float], levels: Sequence[LevelSpec], bound: float,
                       segment_id: int | None = None) -> SelectionResult:
    """Oracle rule over measured per-level losses."""
    if bound < 0:
        raise ValueError("bound must be >= 0")
    for lv in levels:
        if lv.cg not in measured:
            raise ValueError(f"missing measured loss for cg={lv.cg}")
    chosen, fallback = _pick(levels, measured, bound)
    return SelectionResult(segment_id, chosen, fallback, measured_error=dict(measured))


def select_oracle(segment: Segment, levels: Sequence[LevelSpec], bound: float, tasks: Mapping,
                  codec: MultiLevelCodec, weights: BoundConfig = BoundConfig()) -> SelectionResult:
    """Run the tasks on every level's reconstruction and pick the highest feasible gain."""
    if getattr(codec, "phase_", 0) < 1 or not tasks or any(not hasattr(m, "module_") for m in tasks.values()):
        raise ValueError("select_oracle needs a trained codec and fitted task models")
    env = envelopes_for([segment.peak_positions], segment.M) if segment.peak_positions is not None else None
    labels = np.array([segment.label]) if segment.label is not None else None
    data = TaskData(segment.samples[None, :], labels, env)
    measured = {
        lv.cg: float(weighted_task_loss(measured_task_losses(codec, tasks, data, lv.cg), weights.task_weights)[0])
        for lv in levels
    }
    return choose_by_measured(measured, levels, bound, segment.id)


# -- batch evaluation -------------------------------------------------------


@dataclass
class LevelTable:
    """Measured and predicted errors of every segment at every level."""

    ids: np.ndarray
    levels: list
    measured: dict
    predicted: dict
    task_losses: dict = field(default_factory=dict)
    class_predictions: dict = field(default_factory=dict)
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        order = np.argsort(self.ids, kind="stable")
        self.ids = np.asarray(self.ids)[order]
        self.measured = {k: np.asarray(v)[order] for k, v in self.measured.items()}
        self.predicted = {k: np.asarray(v)[order] for k, v in self.predicted.items()}
        self.task_losses = {k: {t: np.asarray(a)[order] for t, a in v.items()} for k, v in self.task_losses.items()}
        self.class_predictions = {k: np.asarray(v)[order] for k, v in self.class_predictions.items()}
        if self.labels is not None:
            self.labels = np.asarray(self.labels)[order]

    def __len__(self):
        return len(self.ids)


def measure_levels(codec: MultiLevelCodec, tasks: Mapping, data: TaskData, ids,
                   weights: BoundConfig = BoundConfig()) -> LevelTable:
    levels = list(codec.level_specs_)
    measured, predicted, per_task, cls_pred = {}, {}, {}, {}
    for lv in levels:
        losses = measured_task_losses(codec, tasks, data, lv.cg)
        per_task[lv.cg] = losses
        measured[lv.cg] = np.asarray(weighted_task_loss(losses, weights.task_weights))
        predicted[lv.cg] = codec.predict_error(data.X, lv.cg)
        if "hr_classify" in tasks:
            cls_pred[lv.cg] = tasks["hr_classify"].predict(codec.reconstruct(data.X, lv.cg))
    return LevelTable(np.asarray(ids), levels, measured, predicted, per_task, cls_pred, data.labels)


def policy_levels(levels: Sequence[LevelSpec], kind: str) -> list[LevelSpec]:
    if kind not in POLICIES:
        raise ValueError(f"unknown policy {kind!r}; expected one of {POLICIES}")
    if kind == "oracle2":
        top = max(levels, key=lambda lv: lv.cg)
        return [top, _identity(levels)]
    return list(levels)


def choose_levels(table: LevelTable, bound: float, kind: str) -> np.ndarray:
    """Chosen gain per segment (ordered by segment id)."""
    levels = policy_levels(table.levels, kind)
    errors = table.predicted if kind == "dynamic" else table.measured
    chosen = np.empty(len(table), dtype=np.int64)
    for i in range(len(table)):
        res = _pick(levels, {lv.cg: errors[lv.cg][i] for lv in levels}, bound)
        chosen[i] = res[0].cg
    return chosen


def report_for_choice(table: LevelTable, chosen: np.ndarray, bound: float, kind: str) -> EvalReport:
    idx = np.arange(len(table))
    losses = np.array([table.measured[cg][i] for i, cg in zip(idx, chosen)])
    report = EvalReport(
        avg_cg=average_cg(chosen),
        effective_loss=float(losses.mean()),
        violation_rate=violation_rate(losses, bound),
        n_segments=len(table),
        bound=float(bound),
        policy=kind,
        n_fallback=int(np.sum(chosen == 1)),
    )
    if table.class_predictions and table.labels is not None:
        preds = np.array([table.class_predictions[cg][i] for i, cg in zip(idx, chosen)])
        m = classification_metrics(preds, table.labels)
        report.macro_precision, report.macro_recall, report.macro_f1 = (
            m["macro_precision"], m["macro_recall"], m["macro_f1"])
        report.per_class = m["per_class"]
    if len(table) >= 4 and all("hr_classify" in v for v in table.task_losses.values()):
        report.cce_quartiles = cce_quartiles({cg: v["hr_classify"] for cg, v in table.task_losses.items()})
    return report


def sweep(bounds: Sequence[float], table: LevelTable, kind: str = "dynamic") -> list[tuple[float, EvalReport]]:
    """Evaluate a policy at each bound over the whole table."""
    if len(table) == 0:
        raise ValueError("empty dataset")
    bounds = [float(b) for b in bounds]
    if any(b2 < b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ValueError("bounds must be sorted ascending")
    return [(b, report_for_choice(table, choose_levels(table, b, kind), b, kind)) for b in bounds]


SWEEP_FIELDS = ("bound", "policy", "avg_cg", "effective_loss", "violation_rate", "n_fallback")


def sweep_rows(results) -> list[dict]:
    return [{"bound": b, "policy": r.policy, "avg_cg": r.avg_cg, "effective_loss": r.effective_loss,
             "violation_rate": r.violation_rate, "n_fallback": r.n_fallback} for b, r in results]
