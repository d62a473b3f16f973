from typing import Optional


class DefinedError(Exception):
    """Base class for all workbench errors"""


class SymbolRangeError(DefinedError, IndexError):
    """Joint-symbol index outside [0, C^N_t)"""


class ShapeMismatchError(DefinedError, ValueError):
    """Array dimensions do not agree"""


class SequenceLengthError(DefinedError, ValueError):
    """Prompt has more pairs or tokens than the model supports"""


class ComplexityGuardError(DefinedError):
    """Exhaustive search requested above the configured length cap"""


class UnsupportedConstellationError(DefinedError):
    """Operation is not defined for this constellation"""


class NumericalInstabilityError(DefinedError, FloatingPointError):
    """Non-finite activation produced by a decoder layer"""

    def __init__(self, layer: int, message: Optional[str] = None):
        self.layer = layer
        super().__init__(message or f"non-finite activations at layer {layer}")


class TrainingDivergedError(DefinedError):
    """Training loss became NaN or infinite"""

    def __init__(self, step: int, trace: list):
        self.step = step
        self.trace = trace
        super().__init__(f"training diverged at step {step}")


class EmptyLossMaskError(DefinedError, ValueError):
    """Loss mask selects no positions"""


class AssumptionViolationError(DefinedError, ValueError):
    """Closed-form expression used outside its validity conditions"""


class CheckpointError(DefinedError):
    """Checkpoint missing, corrupt or written by an unknown format version"""


class ConfigurationError(DefinedError, ValueError):
    """Invalid combination of run options"""
