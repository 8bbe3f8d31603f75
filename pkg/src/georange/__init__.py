"""georange: joint location/text embeddings for zero- and few-shot species
range mapping, with a synthetic benchmark world and an HTTP service."""

__version__ = "0.1.0"

from .geo import BBox, CovariateStack, GeoPoint, GLOBAL_BBOX, RangeRaster
from .model import (ModelConfig, ModelParams, init_model, load_checkpoint,
                    occurrence_probability, save_checkpoint)
from .data import (DatasetManifest, EmbeddingStore, ObservationRecord,
                   SyntheticWorldSpec, TextEmbeddingRecord, TextKind,
                   generate_synthetic_world)
from .training import TrainConfig, TrainData, train
from .fewshot import FewShotConfig, FewShotFit, fit_logreg
from .evals import (BenchmarkConfig, BenchmarkReport, EvalTask,
                    average_precision, run_benchmark, zero_shot_raster)

__all__ = [
    "BBox", "BenchmarkConfig", "BenchmarkReport", "CovariateStack",
    "DatasetManifest", "EmbeddingStore", "EvalTask", "FewShotConfig",
    "FewShotFit", "GLOBAL_BBOX", "GeoPoint", "ModelConfig", "ModelParams",
    "ObservationRecord", "RangeRaster", "SyntheticWorldSpec",
    "TextEmbeddingRecord", "TextKind", "TrainConfig", "TrainData",
    "average_precision", "fit_logreg", "generate_synthetic_world",
    "init_model", "load_checkpoint", "occurrence_probability",
    "run_benchmark", "save_checkpoint", "train", "zero_shot_raster",
]
