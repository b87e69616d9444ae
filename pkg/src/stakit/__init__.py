"""Desk-scale short-term object-interaction anticipation toolkit."""

from .records import (
    GroundTruth,
    StaPrediction,
    StaRecord,
    Taxonomy,
    read_manifest,
    read_predictions,
    validate_record,
    write_manifest,
    write_predictions,
)
from .synthetic import SynthConfig, SyntheticClip, synth_dataset
from .epic import EpicSourceAnnotations, curate_epic
from .evaluation import EvalReport, MatchCriteria, evaluate_run, is_match, top5_ap, top5_map
from .harness import RunConfig, StaModel, build_model, forward_pipeline, train

__all__ = [
    "EpicSourceAnnotations",
    "EvalReport",
    "GroundTruth",
    "MatchCriteria",
    "RunConfig",
    "StaModel",
    "StaPrediction",
    "StaRecord",
    "SynthConfig",
    "SyntheticClip",
    "Taxonomy",
    "build_model",
    "curate_epic",
    "evaluate_run",
    "forward_pipeline",
    "is_match",
    "read_manifest",
    "read_predictions",
    "synth_dataset",
    "top5_ap",
    "top5_map",
    "train",
    "validate_record",
    "write_manifest",
    "write_predictions",
]

__version__ = "0.1.0"
