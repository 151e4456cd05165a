"""Shared domain types and compression-gain arithmetic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

CLASSES = ("normal", "af_like", "noisy", "other")
N_CLASSES = len(CLASSES)
DEFAULT_M = 1024
TASK_IDS = ("hr_classify", "rr_peaks")


def class_index(label) -> int:
    """Map a class name or integer id to its integer id."""
    if isinstance(label, str):
        try:
            return CLASSES.index(label)
        except ValueError:
            raise ValueError(f"unknown class {label!r}; expected one of {CLASSES}") from None
    idx = int(label)
    if not 0 <= idx < N_CLASSES:
        raise ValueError(f"class id {idx} out of range [0, {N_CLASSES})")
    return idx


@dataclass(frozen=True, eq=False)
class Segment:
    """One fixed-length window of normalized signal samples."""

    id: int
    samples: np.ndarray
    sample_rate: float
    label: Optional[int] = None
    peak_positions: Optional[np.ndarray] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D vector")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if self.label is not None:
            object.__setattr__(self, "label", class_index(self.label))
        if self.peak_positions is not None:
            peaks = np.asarray(self.peak_positions, dtype=np.int64)
            if peaks.size and (np.any(np.diff(peaks) <= 0) or peaks[0] < 0 or peaks[-1] >= samples.size):
                raise ValueError("peak_positions must be strictly increasing and within [0, M)")
            peaks.setflags(write=False)
            object.__setattr__(self, "peak_positions", peaks)

    @property
    def M(self) -> int:
        return self.samples.size

    def __eq__(self, other):
        if not isinstance(other, Segment):
            return NotImplemented
        same_peaks = (self.peak_positions is None and other.peak_positions is None) or (
            self.peak_positions is not None
            and other.peak_positions is not None
            and np.array_equal(self.peak_positions, other.peak_positions)
        )
        return (
            self.id == other.id
            and self.sample_rate == other.sample_rate
            and self.label == other.label
            and np.array_equal(self.samples, other.samples)
            and same_peaks
        )

    __hash__ = None


@dataclass(frozen=True, order=True)
class LevelSpec:
    """A compression level. ``latent_len * cg == M`` always."""

    cg: int
    latent_len: int

    def __post_init__(self):
        if self.cg < 1 or self.latent_len < 1:
            raise ValueError(f"cg and latent_len must be positive, got cg={self.cg}, latent_len={self.latent_len}")

    @classmethod
    def for_gain(cls, cg: int, M: int = DEFAULT_M) -> "LevelSpec":
        cg = int(cg)
        if cg < 1:
            raise ValueError(f"cg must be a positive integer, got {cg}")
        if M % cg:
            raise ValueError(f"M not divisible by {cg}")
        return cls(cg=cg, latent_len=M // cg)

    @property
    def is_identity(self) -> bool:
        return self.cg == 1

    @property
    def M(self) -> int:
        return self.cg * self.latent_len


def make_levels(gains: Iterable[int], M: int = DEFAULT_M) -> list[LevelSpec]:
    """Build a validated level set sorted by descending gain."""
    levels = [LevelSpec.for_gain(g, M) for g in gains]
    validate_level_set(levels, M)
    return sorted(levels, key=lambda lv: -lv.cg)


def validate_level_set(levels: Sequence[LevelSpec], M: int) -> None:
    """Raise ``ValueError`` naming the first violated level-set constraint."""
    if M <= 0:
        raise ValueError(f"M must be positive, got {M}")
    gains = [lv.cg for lv in levels]
    if len(set(gains)) != len(gains):
        raise ValueError(f"duplicate cg values in level set {gains}")
    if 1 not in gains:
        raise ValueError("missing identity level")
    for lv in sorted(levels, key=lambda lv: -lv.cg):
        if M % lv.cg:
            raise ValueError(f"M not divisible by {lv.cg}")
        if lv.latent_len * lv.cg != M:
            raise ValueError(f"level cg={lv.cg} has latent_len={lv.latent_len}, expected {M // lv.cg}")


def parse_levels(text: str, M: int = DEFAULT_M) -> list[LevelSpec]:
    """Parse ``"64,32,1"`` into a level set."""
    try:
        gains = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ValueError(f"cannot parse level list {text!r}") from None
    return make_levels(gains, M)


@dataclass(frozen=True)
class BoundConfig:
    """Upper bound on per-segment weighted task error plus the loss weights."""

    upper_bound: float = 0.75
    task_weights: Mapping[str, float] = field(default_factory=lambda: {"hr_classify": 1.0, "rr_peaks": 1.0})
    reconstruction_weight: float = 0.1

    def __post_init__(self):
        if not self.upper_bound >= 0:
            raise ValueError(f"upper_bound must be >= 0, got {self.upper_bound}")
        if self.reconstruction_weight < 0:
            raise ValueError("reconstruction_weight must be >= 0")
        weights = dict(self.task_weights)
        if any(w < 0 for w in weights.values()):
            raise ValueError("task weights must be >= 0")
        if not any(w > 0 for w in weights.values()):
            raise ValueError("at least one task weight must be > 0")
        object.__setattr__(self, "task_weights", weights)


@dataclass(frozen=True, eq=False)
class CompressedRecord:
    """The unit crossing the edge to cloud boundary."""

    segment_id: int
    cg: int
    latent: np.ndarray
    predicted_error: float

    def __post_init__(self):
        latent = np.asarray(self.latent, dtype=np.float32).ravel()
        latent.setflags(write=False)
        object.__setattr__(self, "latent", latent)
        err = float(np.float32(self.predicted_error))
        if not err >= 0:
            raise ValueError(f"predicted_error must be >= 0, got {self.predicted_error}")
        object.__setattr__(self, "predicted_error", err)

    def check_against(self, M: int) -> None:
        if self.cg < 1 or M % self.cg or self.latent.size * self.cg != M:
            raise ValueError(
                f"record {self.segment_id}: latent length {self.latent.size} inconsistent with cg={self.cg}, M={M}"
            )

    def __eq__(self, other):
        if not isinstance(other, CompressedRecord):
            return NotImplemented
        return (
            self.segment_id == other.segment_id
            and self.cg == other.cg
            and self.latent.tobytes() == other.latent.tobytes()
            and np.float32(self.predicted_error).tobytes() == np.float32(other.predicted_error).tobytes()
        )

    __hash__ = None


def average_cg(per_segment_cgs: Sequence[float]) -> float:
    """Arithmetic mean of per-segment compression gains."""
    values = np.asarray(list(per_segment_cgs), dtype=np.float64)
    if values.size == 0:
        raise ValueError("average_cg of an empty list is undefined")
    if np.any(values <= 0):
        raise ValueError("compression gains must be positive")
    return float(values.mean())
