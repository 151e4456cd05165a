"""Task-aware variable-rate compression for streamed physiological signals."""

from .codec import CodecConfig, MultiLevelCodec, count_parameters
from .core import BoundConfig, CompressedRecord, LevelSpec, Segment, average_cg, make_levels, validate_level_set
from .costmodel import CostParams, yearly_cost
from .data import GeneratorParams, generate_dataset, generate_segment, load_csv, split_dataset
from .policy import select_dynamic, select_oracle, sweep
from .tasks import ArrhythmiaClassifier, PeakLocator
from .training import TrainConfig, train_phase1, train_phase2, train_phase3

__version__ = "0.1.0"

__all__ = [
    "ArrhythmiaClassifier",
    "BoundConfig",
    "CodecConfig",
    "CompressedRecord",
    "CostParams",
    "GeneratorParams",
    "LevelSpec",
    "MultiLevelCodec",
    "PeakLocator",
    "Segment",
    "TrainConfig",
    "average_cg",
    "count_parameters",
    "generate_dataset",
    "generate_segment",
    "load_csv",
    "make_levels",
    "select_dynamic",
    "select_oracle",
    "split_dataset",
    "sweep",
    "train_phase1",
    "train_phase2",
    "train_phase3",
    "validate_level_set",
    "yearly_cost",
]
