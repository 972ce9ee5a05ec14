"""Exception types raised across the package."""


class FusionCapError(Exception):
    """Base class for all package errors."""


class ValidationError(FusionCapError, ValueError):
    """Input failed a precondition check. CLI maps this to exit code 1."""


class DegenerateRotation(ValidationError):
    def __init__(self, message, frame=None, joint=None):
        self.frame = frame
        self.joint = joint
        where = []
        if frame is not None:
            where.append(f"frame {frame}")
        if joint is not None:
            where.append(f"joint {joint}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NotARotation(ValidationError):
    pass


class TooShortSequence(ValidationError):
    pass


class InvalidSteps(ValidationError):
    pass


class InvalidStepPair(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class WrongWindow(ValidationError):
    pass


class ModeMismatch(ValidationError):
    pass


class DegenerateConfiguration(ValidationError):
    pass


class MissingModel(ValidationError):
    pass


class OutOfOrderFrame(ValidationError):
    pass


class InvalidConfig(ValidationError):
    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if key is not None:
            prefix.append(f"key {key!r}")
        if prefix:
            message = f"{': '.join(prefix)}: {message}"
        super().__init__(message)


class HashMismatch(ValidationError):
    pass


class NonFiniteLoss(FusionCapError, ArithmeticError):
    """Training diverged. CLI maps this to exit code 2."""
