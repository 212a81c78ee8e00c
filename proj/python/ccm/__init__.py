"""Consistency models with ControlNet-style control on 16x16 shapes."""

from ._core import (
    ConfigError,
    Lab,
    MissingArtifact,
    NumericError,
    RangeError,
    Schedule,
    StructuralError,
    UsageError,
    cm_scalings,
    default_config,
    edge_condition,
    gen_shapes,
    lowres_condition,
    make_schedule,
    mask_condition,
    resolve_config,
    sliced_w2,
    w2_1d,
)

__all__ = [
    "ConfigError",
    "Lab",
    "MissingArtifact",
    "NumericError",
    "RangeError",
    "Schedule",
    "StructuralError",
    "UsageError",
    "cm_scalings",
    "default_config",
    "edge_condition",
    "gen_shapes",
    "lowres_condition",
    "make_schedule",
    "mask_condition",
    "resolve_config",
    "sliced_w2",
    "w2_1d",
]
