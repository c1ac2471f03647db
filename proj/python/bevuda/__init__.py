"""Teacher-student domain adaptation for toy BEV detection."""

from ._bevuda import (
    Config,
    ConfigError,
    FormatError,
    NumericError,
    ShapeError,
    apply_fog,
    average_precision,
    generate_scene,
    js_divergence,
    load_checkpoint,
    pool_to_bev,
    run_variant,
    total_da_loss,
    transfer_loss,
    uema_blend,
    uncertainty_map,
)

__all__ = [
    "Config",
    "ConfigError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "apply_fog",
    "average_precision",
    "generate_scene",
    "js_divergence",
    "load_checkpoint",
    "pool_to_bev",
    "run_variant",
    "total_da_loss",
    "transfer_loss",
    "uema_blend",
    "uncertainty_map",
]
