# src/flowtsvad/errors.py
"""
Exception types. Each subclasses the builtin a caller would naturally catch
and carries a short `category` used by the CLI error line.
"""


class FlowTsvadError(Exception):
    category = "internal"


class ShapeError(FlowTsvadError, ValueError):
    category = "shape"


class ConfigError(FlowTsvadError, ValueError):
    category = "config"


class DataError(FlowTsvadError, RuntimeError):
    category = "data"


class MissingArtifactError(DataError, FileNotFoundError):
    category = "data"


class CheckpointError(FlowTsvadError, RuntimeError):
    category = "checkpoint"


class DivergenceError(FlowTsvadError, RuntimeError):
    category = "divergence"


class ScoringError(FlowTsvadError, ValueError):
    category = "scoring"


EXIT_CODES = {
    "internal": 1,
    "config": 2,
    "data": 3,
    "checkpoint": 4,
    "divergence": 5,
    "scoring": 6,
    "shape": 7,
}
