"""Normalization benchmark: BN/LN layers, TID and conditioning diagnostics, training runs."""

from ._normbench import (
    CheckpointError,
    ConfigError,
    NumericError,
    ShapeError,
    StateError,
    average_statistics,
    bn_forward,
    c_max,
    c_p,
    cli,
    config_keys,
    decomposition_check,
    ema_update,
    ln_forward,
    load_checkpoint,
    run,
    singular_values,
    tid,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "NumericError",
    "ShapeError",
    "StateError",
    "average_statistics",
    "bn_forward",
    "c_max",
    "c_p",
    "cli",
    "config_keys",
    "decomposition_check",
    "ema_update",
    "ln_forward",
    "load_checkpoint",
    "run",
    "singular_values",
    "tid",
]
