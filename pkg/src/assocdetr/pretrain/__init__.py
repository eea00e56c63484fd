"""Background-classification pretraining: data, optimizer, loop, metrics."""
from .dataset import DatasetError, load_directory
from .optim import AdamW
from .regions import Rect, RegionFormatError, RegionLabelMap, parse_region_file, patch_label, serialize_region_map
from .synth import LabeledPatch, synth_corpus
from .train import (
    EvalResult,
    MetricRecord,
    NonFiniteLossError,
    TrainConfig,
    TrainResult,
    evaluate,
    evaluate_predictions,
    linear_probe,
    train,
)

__all__ = [
    "DatasetError", "load_directory", "AdamW", "Rect", "RegionFormatError", "RegionLabelMap",
    "parse_region_file", "patch_label", "serialize_region_map", "LabeledPatch", "synth_corpus",
    "EvalResult", "MetricRecord", "NonFiniteLossError", "TrainConfig", "TrainResult", "evaluate",
    "evaluate_predictions", "linear_probe", "train",
]
