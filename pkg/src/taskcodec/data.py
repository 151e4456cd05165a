"""Labeled segments: synthetic ECG-like generator, CSV ingestion, splitting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import CLASSES, DEFAULT_M, N_CLASSES, Segment, class_index

DEFAULT_SAMPLE_RATE = 300.0


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs of the synthetic generator.

    ``rr_jitter`` and ``noise_amplitude`` describe a normal rhythm. The
    class-specific ``(low, high)`` ranges are sampled per segment, so each
    abnormal class spans subtle to obvious cases.
    """

    mean_rr: float = 0.6
    rr_jitter: float = 0.03
    noise_amplitude: float = 0.01
    baseline_wander_amplitude: float = 0.05
    class_mix: tuple = (0.25, 0.25, 0.25, 0.25)
    af_rr_jitter: tuple = (0.1, 0.3)
    noisy_noise_amplitude: tuple = (0.06, 0.3)
    alternans_ratio: tuple = (0.5, 0.8)
    qrs_width: float = 0.012
    sample_rate: float = DEFAULT_SAMPLE_RATE
    M: int = DEFAULT_M

    def __post_init__(self):
        mix = tuple(float(p) for p in self.class_mix)
        if len(mix) != N_CLASSES:
            raise ValueError(f"class_mix must have {N_CLASSES} entries")
        if any(p < 0 for p in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError("class_mix must be nonnegative and sum to 1")
        object.__setattr__(self, "class_mix", mix)
        for name in ("af_rr_jitter", "noisy_noise_amplitude", "alternans_ratio"):
            value = getattr(self, name)
            lo, hi = (value, value) if np.isscalar(value) else tuple(value)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be a nonnegative (low, high) range, got {value}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        scalars = {
            "mean_rr": self.mean_rr,
            "rr_jitter": self.rr_jitter,
            "noise_amplitude": self.noise_amplitude,
            "baseline_wander_amplitude": self.baseline_wander_amplitude,
            "qrs_width": self.qrs_width,
            "sample_rate": self.sample_rate,
        }
        for name, value in scalars.items():
            if not value >= 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")
        if self.mean_rr <= 0 or self.sample_rate <= 0 or self.qrs_width <= 0:
            raise ValueError("mean_rr, sample_rate and qrs_width must be positive")
        if self.M <= 0:
            raise ValueError("M must be positive")

    @property
    def min_gap(self) -> float:
        """Refractory gap between consecutive beats, in samples."""
        return 0.25 * self.mean_rr * self.sample_rate


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int

    def __post_init__(self):
        ids = [s.id for part in (self.train, self.validation, self.test) for s in part]
        if len(ids) != len(set(ids)):
            raise ValueError("dataset splits overlap by segment id")


def normalize_minmax(x: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a flat signal maps to all 0.5."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 1e-12:
        return np.full_like(x, 0.5)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def _qrs(t: np.ndarray, center: float, amplitude: float, sigma: float) -> np.ndarray:
    # R wave flanked by symmetric Q/S dips, so the maximum stays on the center sample
    d = 2.5 * sigma
    r = np.exp(-0.5 * ((t - center) / sigma) ** 2)
    q = np.exp(-0.5 * ((t - center + d) / (0.8 * sigma)) ** 2)
    s = np.exp(-0.5 * ((t - center - d) / (0.8 * sigma)) ** 2)
    return amplitude * (r - 0.25 * (q + s))


def _beat_times(params: GeneratorParams, jitter: float, rng: np.random.Generator) -> np.ndarray:
    fs, M = params.sample_rate, params.M
    base = params.mean_rr * fs * rng.uniform(0.9, 1.1)
    min_gap = math.ceil(params.min_gap)
    t = -int(round(rng.uniform(0.0, base)))
    times = [t]
    while t < M + base:
        gap = base * (1.0 + jitter * rng.standard_normal())
        t += max(min_gap, int(round(gap)))
        times.append(t)
    return np.asarray(times, dtype=np.int64)


def pulse_train(beats: np.ndarray, amplitudes: np.ndarray, params: GeneratorParams) -> np.ndarray:
    """Sum of QRS-shaped pulses centred on ``beats``."""
    t = np.arange(params.M, dtype=np.float64)
    sigma = params.qrs_width * params.sample_rate
    out = np.zeros(params.M)
    for b, a in zip(beats, amplitudes):
        if -8 * sigma < b < params.M + 8 * sigma:
            out += _qrs(t, float(b), float(a), sigma)
    return out


def generate_segment(
    params: GeneratorParams,
    label,
    seed: int,
    *,
    segment_id: Optional[int] = None,
    normalize: bool = True,
) -> Segment:
    """Synthesize one labeled segment with exact R-peak positions."""
    cls = class_index(label)
    rng = np.random.default_rng(seed)
    name = CLASSES[cls]
    jitter = rng.uniform(*params.af_rr_jitter) if name == "af_like" else params.rr_jitter
    noise = rng.uniform(*params.noisy_noise_amplitude) if name == "noisy" else params.noise_amplitude
    ratio = rng.uniform(*params.alternans_ratio) if name == "other" else 1.0

    beats = _beat_times(params, jitter, rng)
    amplitudes = rng.uniform(0.9, 1.1) * np.ones(beats.size)
    if name == "other":
        amplitudes[rng.integers(2)::2] *= ratio
    x = pulse_train(beats, amplitudes, params)

    t = np.arange(params.M) / params.sample_rate
    wander_freq = rng.uniform(0.15, 0.5)
    wander_phase = rng.uniform(0, 2 * np.pi)
    x = x + params.baseline_wander_amplitude * np.sin(2 * np.pi * wander_freq * t + wander_phase)
    x = x + noise * rng.standard_normal(params.M)

    peaks = beats[(beats >= 0) & (beats < params.M)]
    return Segment(
        id=seed if segment_id is None else segment_id,
        samples=normalize_minmax(x) if normalize else x,
        sample_rate=params.sample_rate,
        label=cls,
        peak_positions=peaks,
    )


def generate_dataset(n: int, params: GeneratorParams = GeneratorParams(), seed: int = 0, id_offset: int = 0) -> list:
    """``n`` segments with labels drawn from ``params.class_mix``."""
    rng = np.random.default_rng(seed)
    labels = rng.choice(N_CLASSES, size=n, p=params.class_mix)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    return [
        generate_segment(params, int(lab), int(s), segment_id=id_offset + i)
        for i, (lab, s) in enumerate(zip(labels, seeds))
    ]


def load_csv(
    path,
    M: int = DEFAULT_M,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    *,
    max_cg: Optional[int] = None,
    id_offset: int = 0,
) -> list:
    """Read a one-sample-per-row CSV into normalized, non-overlapping windows.

    An optional second column holds an integer class label; the first row's
    label is applied to every window. Trailing samples short of ``M`` are dropped.
    """
    if M <= 0:
        raise ValueError("M must be positive")
    if max_cg is not None and M % max_cg:
        raise ValueError(f"M not divisible by {max_cg}")
    values, label = [], None
    with open(path, newline="") as fh:
        for rowno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            try:
                values.append(float(row[0]))
                if len(row) > 1 and row[1].strip() and label is None:
                    label = class_index(int(row[1]))
            except ValueError as exc:
                raise ValueError(f"{path}: cannot parse row {rowno}: {row!r} ({exc})") from None
    x = np.asarray(values, dtype=np.float64)
    n = x.size // M
    return [
        Segment(
            id=id_offset + i,
            samples=normalize_minmax(x[i * M:(i + 1) * M]),
            sample_rate=sample_rate,
            label=label,
        )
        for i in range(n)
    ]


def split_dataset(segments: Sequence[Segment], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Deterministic shuffled train/validation/test split."""
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(segments)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * fr[0]))
    n_val = min(int(round(n * fr[1])), n - n_train)
    parts = np.split(order, [n_train, n_train + n_val])
    return DatasetSplit(*[[segments[i] for i in p] for p in parts], seed=seed)


def load_manifest(path) -> DatasetSplit:
    """Build a split from a JSON manifest of CSV files."""
    path = Path(path)
    spec = json.loads(path.read_text())
    M = int(spec.get("M", DEFAULT_M))
    fs = float(spec.get("sample_rate", DEFAULT_SAMPLE_RATE))
    segments = []
    for f in spec["files"]:
        fp = Path(f) if Path(f).is_absolute() else path.parent / f
        segments.extend(load_csv(fp, M, fs, id_offset=len(segments)))
    return split_dataset(segments, spec.get("fractions", (0.8, 0.1, 0.1)), int(spec.get("seed", 0)))


def to_arrays(segments: Sequence[Segment]):
    """Stack segments into ``(X, y, peaks, ids)``; missing labels become -1."""
    if not segments:
        raise ValueError("no segments")
    X = np.stack([s.samples for s in segments])
    y = np.array([-1 if s.label is None else s.label for s in segments], dtype=np.int64)
    peaks = [s.peak_positions for s in segments]
    ids = np.array([s.id for s in segments], dtype=np.int64)
    return X, y, peaks, ids


def save_split(split: DatasetSplit, path) -> None:
    """Persist a split as a single ``.npz``."""
    payload = {"seed": np.int64(split.seed)}
    for name in ("train", "validation", "test"):
        segs = getattr(split, name)
        payload[f"{name}_X"] = np.stack([s.samples for s in segs]) if segs else np.zeros((0, 0))
        payload[f"{name}_y"] = np.array([-1 if s.label is None else s.label for s in segs], dtype=np.int64)
        payload[f"{name}_ids"] = np.array([s.id for s in segs], dtype=np.int64)
        payload[f"{name}_fs"] = np.array([s.sample_rate for s in segs], dtype=np.float64)
        peaks = [np.array([], dtype=np.int64) if s.peak_positions is None else s.peak_positions for s in segs]
        payload[f"{name}_peaks"] = np.concatenate(peaks) if peaks else np.zeros(0, dtype=np.int64)
        payload[f"{name}_npeaks"] = np.array(
            [-1 if s.peak_positions is None else len(s.peak_positions) for s in segs], dtype=np.int64
        )
    np.savez(path, **payload)


def load_split(path) -> DatasetSplit:
    with np.load(path) as z:
        parts = {}
        for name in ("train", "validation", "test"):
            X, y, ids, fs = z[f"{name}_X"], z[f"{name}_y"], z[f"{name}_ids"], z[f"{name}_fs"]
            flat, counts = z[f"{name}_peaks"], z[f"{name}_npeaks"]
            offsets = np.concatenate([[0], np.cumsum(np.maximum(counts, 0))])
            parts[name] = [
                Segment(
                    id=int(ids[i]),
                    samples=X[i],
                    sample_rate=float(fs[i]),
                    label=None if y[i] < 0 else int(y[i]),
                    peak_positions=None if counts[i] < 0 else flat[offsets[i]:offsets[i + 1]],
                )
                for i in range(len(ids))
            ]
        return DatasetSplit(parts["train"], parts["validation"], parts["test"], seed=int(z["seed"]))


def make_synthetic_split(
    n_train: int = 2000,
    n_validation: int = 200,
    n_test: int = 200,
    params: GeneratorParams = GeneratorParams(),
    seed: int = 0,
) -> DatasetSplit:
    """Generate disjoint train/validation/test sets from independent seeds."""
    ss = np.random.SeedSequence(seed)
    s_train, s_val, s_test = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    train = generate_dataset(n_train, params, s_train, id_offset=0)
    val = generate_dataset(n_validation, params, s_val, id_offset=n_train)
    test = generate_dataset(n_test, params, s_test, id_offset=n_train + n_validation)
    return DatasetSplit(train, val, test, seed=seed)
