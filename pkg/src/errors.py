from typing import Optional


class StbError(Exception):
    """Base class for every error raised by the toolkit"""


class DimensionError(StbError, ValueError):
    """Operand shapes do not fit the kernel"""


class NumericError(StbError, ArithmeticError):
    """NaN input, zero vector or similar numeric breakdown"""


class EmptyAxisError(StbError, ValueError):
    """Reduction or projection over an axis of length zero"""


class LabelError(StbError, IndexError):
    """Class label outside the logits range"""


class ContractError(StbError):
    """A caller broke a documented pre-condition"""


class ConfigError(StbError, ValueError):
    """Invalid or inconsistent configuration"""


class RangeError(StbError, ValueError):
    """Requested count outside the admissible range"""


class CheckpointError(StbError):
    """Checkpoint missing, malformed or shape-incompatible"""


class ManifestError(StbError):
    """Dataset manifest missing a required field"""


class ValidationError(StbError):
    """Dataset splits violate their invariants"""


class ProtocolError(StbError):
    """Trial list or score arrays cannot support a verification metric"""


class TrainingError(StbError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class MissingArtifactError(StbError):
    def __init__(self, artifact: str, hint: Optional[str] = None):
        message = f"Missing artifact: {artifact}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)
        self.artifact = artifact


class PropertyFailure(StbError):
    def __init__(self, prop: str, detail: str = ''):
        super().__init__(f"Property failed: {prop}" + (f" - {detail}" if detail else ''))
        self.prop = prop


class OutputExistsError(StbError):
    """Command output already present and --force not given"""
