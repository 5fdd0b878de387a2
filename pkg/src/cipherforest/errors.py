"""Exception types shared across the engine, the compiler and the CLI."""


class CipherForestError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CipherForestError):
    """Vector or matrix shape does not match the engine/layout geometry."""


class KeyMismatchError(CipherForestError):
    """Handle was produced by a different engine instance / key set."""


class AlignmentError(CipherForestError):
    """Operands disagree on level or scale."""


class DepthBudgetError(CipherForestError):
    """An operation would consume more multiplicative levels than remain."""

    def __init__(self, operation: str, level: int):
        self.operation = operation
        self.level = level
        super().__init__(
            f"depth budget exhausted in '{operation}': ciphertext has {level} "
            f"level(s) left"
        )


class RotationKeyError(CipherForestError):
    """No Galois key was generated for the requested rotation step."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"no rotation key for step {step}")


class EncodingRangeError(CipherForestError):
    """Plaintext values exceed the encoder's working range."""


class LayoutError(CipherForestError):
    """Packing layout violates the slot-capacity constraint."""


class NormalizationError(CipherForestError):
    """Network is in the wrong normalization state for the operation."""


class SchemaError(CipherForestError):
    """A serialized model/config/dataset file violates its schema."""


class ConfigError(CipherForestError):
    """Experiment configuration is invalid."""


class StageError(CipherForestError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {message}")


class UnsupportedTaskError(CipherForestError):
    """Operation requested for a task it does not support (e.g. regression)."""
