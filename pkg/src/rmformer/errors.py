"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not line up (names the offending axis or operand)."""


class ContractViolation(ValueError):
    """A documented precondition of an operation was not met."""


class ConfigError(ValueError):
    """Invalid configuration value or file."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or has an unsupported version."""


class NonFiniteLoss(RuntimeError):
    """Training produced a NaN/inf loss term."""

    def __init__(self, step, term, value):
        super().__init__(f"non-finite loss at step {step}: first bad term '{term}' = {value}")
        self.step = step
        self.term = term
        self.value = value
