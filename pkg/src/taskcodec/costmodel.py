"""Parametric yearly cloud-cost model for the four operational models.

Storage is billed per GB-month on data accumulated over the year; since
retained volume grows linearly, the mean retained volume is half the
year-end volume. Compute covers decompression only (inbound traffic is free).
All prices are inputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

MODELS = ("no-compression", "lossless", "dynamic-deep", "dynamic-deep-with-uncompressed")
GB = 1e9


@dataclass(frozen=True)
class CostParams:
    n_beds: int = 200
    samples_per_second: float = 300.0
    bytes_per_sample: int = 2
    hours_per_year: float = 8760.0
    segment_samples: int = 1024
    storage_price: float = 0.02  # per GB-month
    compute_price: float = 0.03  # per instance-hour
    decompress_throughput: float = 2e6  # learned-decoder segments per instance-hour
    lossless_decompress_throughput: float = 2e8
    fetch_fraction: float = 0.05
    cg_lossless: float = 2.7
    avg_cg: float = 48.31

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")
        if not 0.0 <= self.fetch_fraction <= 1.0:
            raise ValueError("fetch_fraction must lie in [0, 1]")

    @property
    def raw_bytes_per_year(self) -> float:
        return self.n_beds * self.samples_per_second * self.bytes_per_sample * self.hours_per_year * 3600.0

    @property
    def segments_per_year(self) -> float:
        return self.n_beds * self.samples_per_second * self.hours_per_year * 3600.0 / self.segment_samples


@dataclass(frozen=True)
class CostBreakdown:
    model: str
    storage_cost: float
    compute_cost: float

    @property
    def total(self) -> float:
        return self.storage_cost + self.compute_cost

    def to_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


def _storage(p: CostParams, cg: float) -> float:
    if cg <= 0:
        raise ValueError("compression gain must be positive")
    year_end_gb = p.raw_bytes_per_year / cg / GB
    months = p.hours_per_year / 730.0
    return p.storage_price * 0.5 * year_end_gb * months


def _decompress(p: CostParams, share: float, throughput: float) -> float:
    if share == 0:
        return 0.0
    if throughput <= 0:
        raise ValueError("decompression throughput must be positive")
    return p.compute_price * share * p.segments_per_year / throughput


def yearly_cost(params: CostParams, model: str) -> CostBreakdown:
    x = params.fetch_fraction
    if model == "no-compression":
        return CostBreakdown(model, _storage(params, 1.0), 0.0)
    if model == "lossless":
        return CostBreakdown(model, _storage(params, params.cg_lossless),
                             _decompress(params, x + 1.0, params.lossless_decompress_throughput))
    if model == "dynamic-deep":
        return CostBreakdown(model, _storage(params, params.avg_cg),
                             _decompress(params, x + 1.0, params.decompress_throughput))
    if model == "dynamic-deep-with-uncompressed":
        # tasks ran on the uncompressed copy at ingest; only expert fetches decompress
        return CostBreakdown(model, _storage(params, params.avg_cg),
                             _decompress(params, x, params.decompress_throughput))
    raise ValueError(f"unknown operational model {model!r}; expected one of {MODELS}")


def all_models(params: CostParams) -> list[CostBreakdown]:
    return [yearly_cost(params, m) for m in MODELS]


def cost_sensitivity(params: CostParams, model: str, name: str, values) -> list[tuple[float, CostBreakdown]]:
    if name not in {f.name for f in fields(CostParams)}:
        raise ValueError(f"unknown cost parameter {name!r}")
    return [(v, yearly_cost(replace(params, **{name: v}), model)) for v in values]


def load_cost_params(path) -> CostParams:
    """Read key-value params from YAML or JSON; unknown keys are an error."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a key-value mapping")
    known = {f.name for f in fields(CostParams)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{path}: unknown cost parameter(s) {sorted(unknown)}")
    return CostParams(**data)


def write_breakdowns(breakdowns, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [b.to_dict() for b in breakdowns]
    with open(out / "cost.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "storage_cost", "compute_cost", "total"])
        w.writeheader()
        w.writerows(rows)
    (out / "cost.json").write_text(json.dumps(rows, indent=2))
