"""Exact top-K maximum inner product serving for matrix factorization models."""

from .brute import BlockSpec, ThroughputSample, default_blocks, measure_throughput, topk_matmul, topk_naive
from .clustering import Clustering, angular_distance, compute_max_angles, kmeans
from .index import (
    CentroidIndex,
    TopKResult,
    add_user,
    build_index,
    insert_item,
    item_bound,
    load_index,
    query_batch,
    query_user,
    query_vector,
    save_index,
)
from .model_io import (
    DimensionMismatchError,
    FactorMatrix,
    FormatError,
    ModelIOError,
    ModelPair,
    NonFiniteValueError,
    SyntheticSpec,
    generate_synthetic,
    load_matrix,
    load_model,
    predicted_rating,
    save_matrix,
    save_model,
)
from .optimizer import (
    INDEX,
    MATMUL,
    CostEstimate,
    PipelineReport,
    WalkEstimate,
    calibrate_h0,
    decide,
    estimate_walk_length,
    hardware_factor,
    pruning_fraction,
    run_pipeline,
)

__version__ = "0.1.0"

__all__ = [
    "BlockSpec",
    "CentroidIndex",
    "Clustering",
    "CostEstimate",
    "DimensionMismatchError",
    "FactorMatrix",
    "FormatError",
    "INDEX",
    "MATMUL",
    "ModelIOError",
    "ModelPair",
    "NonFiniteValueError",
    "PipelineReport",
    "SyntheticSpec",
    "ThroughputSample",
    "TopKResult",
    "WalkEstimate",
    "add_user",
    "angular_distance",
    "build_index",
    "calibrate_h0",
    "compute_max_angles",
    "decide",
    "default_blocks",
    "estimate_walk_length",
    "generate_synthetic",
    "hardware_factor",
    "insert_item",
    "item_bound",
    "kmeans",
    "load_index",
    "load_matrix",
    "load_model",
    "measure_throughput",
    "predicted_rating",
    "pruning_fraction",
    "query_batch",
    "query_user",
    "query_vector",
    "run_pipeline",
    "save_index",
    "save_matrix",
    "save_model",
    "topk_matmul",
    "topk_naive",
]
