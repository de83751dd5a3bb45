"""Operational surface: config files, checkpoints, and the camopt CLI."""

from .checkpoint import (Checkpoint, CheckpointError, checkpoint_bytes,
                         load_checkpoint, save_checkpoint,
                         weights_from_checkpoint, weights_to_checkpoint)
from .config import (ConfigError, ExperimentConfig, args_manifest,
                     load_config, parse_config, run_manifest)

__all__ = [
    "Checkpoint", "CheckpointError", "checkpoint_bytes", "load_checkpoint",
    "save_checkpoint", "weights_from_checkpoint", "weights_to_checkpoint",
    "ConfigError", "ExperimentConfig", "args_manifest", "load_config",
    "parse_config", "run_manifest",
]
