"""
Exception Hierarchy

Every error raised on purpose by the package derives from `SFAError`, so the
command-line entry point can tell expected failures (bad config, malformed
data, diverging losses) from programming errors.
"""

from __future__ import annotations

from pathlib import Path


class SFAError(Exception):
    """Base class for all package errors."""


class ShapeError(SFAError, ValueError):
    """Operands of a tensor op do not conform."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {shown}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class GradientCheckError(SFAError, ValueError):
    """Invalid request to the finite-difference checker."""


class ConfigError(SFAError, ValueError):
    """Invalid configuration value or inconsistent experiment setup."""


class AlignmentError(SFAError, ValueError):
    """Alignment loss called on an unsuitable sequence."""


class MatchingError(SFAError, ValueError):
    """Bipartite matching or detection loss received invalid input."""


class ConsistencyError(SFAError, ValueError):
    """Consistency loss received mismatched predictions."""


class DatasetFormatError(SFAError):
    """Malformed or missing dataset file.

    Parameters
    ----------
    path : Path
        The offending file.
    message : str
        What went wrong.
    offset : int, optional
        Byte (or character, for JSON) offset at which parsing failed.
    """

    def __init__(self, path: Path | str, message: str, offset: int | None = None):
        self.path = Path(path)
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{self.path}{where}: {message}")


class TrainingError(SFAError, RuntimeError):
    """Training step cannot proceed (empty batch, non-finite loss)."""


class CheckpointError(SFAError):
    """Checkpoint archive cannot be read or does not match the model."""


class DivergenceError(SFAError, ValueError):
    """Domain-divergence estimate requested on too few or unbalanced samples."""


__all__ = [
    "SFAError",
    "ShapeError",
    "GradientCheckError",
    "ConfigError",
    "AlignmentError",
    "MatchingError",
    "ConsistencyError",
    "DatasetFormatError",
    "TrainingError",
    "CheckpointError",
    "DivergenceError",
]
