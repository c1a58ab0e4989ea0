"""Lossless tensor-level deduplication and delta storage for model weight files."""

from .codec import CodecId, DeltaBlob, decode, encode, reduction_ratio
from .config import EngineConfig, load_config
from .fingerprint import Sketch, SketchParams, TensorSketcher, hamming_estimate, normalized_distance, sketch, tensor_digest
from .index import SketchIndex
from .planner import CompatKey, FlexSplit, Planner, PlannerConfig, cluster_reduction_ratio, exact_plan
from .predictor import DEFAULT_COEFFICIENTS, PredictorCoefficients, RatioPredictor, predict_ratio
from .store import IngestError, IntegrityError, NotFoundError, Store
from .tensor_format import DType, TensorView, parse_model, write_model

__version__ = "0.1.0"

__all__ = [
    "CodecId",
    "CompatKey",
    "DEFAULT_COEFFICIENTS",
    "DType",
    "DeltaBlob",
    "EngineConfig",
    "FlexSplit",
    "IngestError",
    "IntegrityError",
    "NotFoundError",
    "Planner",
    "PlannerConfig",
    "PredictorCoefficients",
    "RatioPredictor",
    "Sketch",
    "SketchIndex",
    "SketchParams",
    "Store",
    "TensorSketcher",
    "TensorView",
    "cluster_reduction_ratio",
    "decode",
    "encode",
    "exact_plan",
    "hamming_estimate",
    "load_config",
    "normalized_distance",
    "parse_model",
    "predict_ratio",
    "reduction_ratio",
    "sketch",
    "tensor_digest",
    "write_model",
]
