"""
Early-Exit Engine - Error Types

Every failure the engine can report is an EngineError carrying a category,
so the CLI can map it to an exit code.
"""

from typing import Optional


class EngineError(Exception):
    """Base error: a category plus a human-readable message."""

    category = "engine"

    def __init__(self, message: str):
        self.message = message
        super().__init__(f"{self.category}: {message}")


class DimensionError(EngineError):
    category = "dimension"


class LabelError(EngineError):
    category = "label"


class ConnectivityError(EngineError):
    category = "connectivity"


class CapacityError(EngineError):
    category = "capacity"


class PolicyError(EngineError):
    """Raised when exit bookkeeping leaves the caches in an impossible state."""

    category = "policy"


class DiscretizationError(EngineError):
    category = "discretization"


class ConfigurationError(EngineError):
    category = "configuration"


class AccountingError(EngineError):
    category = "accounting"


class IngestionError(EngineError):
    category = "ingestion"


class ArtifactIOError(EngineError):
    category = "io"


class TrainingError(EngineError):
    """Divergence during training; remembers the step it happened on."""

    category = "training"

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


class CheckpointError(EngineError):
    """Archive/manifest mismatch, naming the offending tensor when known."""

    category = "checkpoint"

    def __init__(self, message: str, tensor: Optional[str] = None):
        self.tensor = tensor
        if tensor is not None:
            message = f"tensor '{tensor}': {message}"
        super().__init__(message)
