"""Metrics and reports: violations, classification scores, loss quartiles, lossless baseline."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from sklearn.metrics import precision_recall_fscore_support

from .core import CLASSES, Segment


@dataclass
class EvalReport:
    avg_cg: float
    effective_loss: float
    violation_rate: float
    n_segments: int
    bound: Optional[float] = None
    policy: str = ""
    n_fallback: int = 0
    macro_precision: Optional[float] = None
    macro_recall: Optional[float] = None
    macro_f1: Optional[float] = None
    per_class: dict = field(default_factory=dict)
    cce_quartiles: dict = field(default_factory=dict)
    peak_f1: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.violation_rate <= 1.0:
            raise ValueError("violation_rate must lie in [0, 1]")
        for lv, (q1, med, q3) in self.cce_quartiles.items():
            if not q1 <= med <= q3:
                raise ValueError(f"quartiles out of order for level {lv}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cce_quartiles"] = {str(k): list(v) for k, v in self.cce_quartiles.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def violation_rate(losses: Sequence[float], bound: float) -> float:
    """Fraction of segments whose measured loss exceeds ``bound``."""
    if bound < 0:
        raise ValueError("bound must be >= 0")
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("violation_rate of an empty set is undefined")
    return float(np.mean(arr > bound))


def classification_metrics(predictions, labels) -> dict:
    """Per-class and macro precision/recall/F1; zero denominators score 0."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("no predictions")
    present = np.union1d(pred, true)
    p, r, f, support = precision_recall_fscore_support(true, pred, labels=present, zero_division=0)
    per_class = {
        CLASSES[int(c)] if 0 <= int(c) < len(CLASSES) else str(c): {
            "precision": float(p[i]), "recall": float(r[i]), "f1": float(f[i]), "support": int(support[i])
        }
        for i, c in enumerate(present)
    }
    return {
        "per_class": per_class,
        "macro_precision": float(p.mean()),
        "macro_recall": float(r.mean()),
        "macro_f1": float(f.mean()),
        "accuracy": float(np.mean(pred == true)),
    }


def quartiles(values) -> tuple[float, float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 4:
        raise ValueError("need at least 4 values for quartiles")
    q1, med, q3 = np.percentile(arr, [25, 50, 75], method="linear")
    return float(q1), float(med), float(q3)


def cce_quartiles(per_level: Mapping[int, Sequence[float]]) -> dict:
    """``(q1, median, q3)`` of per-segment CCE for each level."""
    return {cg: quartiles(v) for cg, v in per_level.items()}


def encode_samples_u16(samples) -> bytes:
    """Canonical raw encoding: [0, 1] scaled to 16-bit little-endian integers."""
    x = np.clip(np.asarray(samples, dtype=np.float64), 0.0, 1.0)
    return np.round(x * 65535).astype("<u2").tobytes()


def lossless_baseline_cg(segments, coder: Callable[[bytes], bytes] = lambda b: zlib.compress(b, 9)):
    """Mean and std of per-segment raw/compressed byte ratios under a lossless coder.

    The default coder is DEFLATE (LZ77 + Huffman) at maximum effort.
    """
    ratios = []
    for seg in segments:
        raw = encode_samples_u16(seg.samples if isinstance(seg, Segment) else seg)
        ratios.append(len(raw) / len(coder(raw)))
    if not ratios:
        raise ValueError("no segments")
    r = np.asarray(ratios)
    return float(r.mean()), float(r.std())


def spearman(a, b) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)
