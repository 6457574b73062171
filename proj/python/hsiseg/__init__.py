"""Hyperspectral tile segmentation with CNN and graph attention models."""

from ._core import (
    ConfigError,
    DomainError,
    Error,
    FormatError,
    NumericalError,
    ShapeError,
    default_config,
    generate_phantom,
    knn_graph,
    load_cube,
    loss_weight,
    metrics,
    resolve_config,
    roc_auc,
    run_pipeline,
    save_cube,
    slic,
    tile_quality,
)

__all__ = [
    "ConfigError",
    "DomainError",
    "Error",
    "FormatError",
    "NumericalError",
    "ShapeError",
    "default_config",
    "generate_phantom",
    "knn_graph",
    "load_cube",
    "loss_weight",
    "metrics",
    "resolve_config",
    "roc_auc",
    "run_pipeline",
    "save_cube",
    "slic",
    "tile_quality",
]
