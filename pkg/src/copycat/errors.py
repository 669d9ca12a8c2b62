"""Exception hierarchy shared by every copycat module."""


class CopycatError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class ValidationError(CopycatError, ValueError):
    code = "validation_error"


class TrainingDivergedError(CopycatError, RuntimeError):
    code = "training_diverged"


class BudgetExceededError(CopycatError):
    code = "budget_exceeded"


class TransportError(CopycatError, ConnectionError):
    code = "transport_error"


class ProtocolError(CopycatError):
    """Oracle service answered with a non-retryable error status."""

    code = "protocol_error"

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class MissingClassError(ValidationError):
    code = "missing_class"

    def __init__(self, classes):
        self.classes = sorted(int(c) for c in classes)
        super().__init__(f"no records for classes {self.classes}")


class StratificationError(ValidationError):
    code = "stratification_error"


class PoolExhaustedError(ValidationError):
    code = "pool_exhausted"

    def __init__(self, class_index, message=None):
        self.class_index = int(class_index)
        super().__init__(message or f"neighbor pool exhausted for class {self.class_index}")


class UndefinedClassError(ValidationError):
    code = "undefined_class"


class UnsupportedLayerError(CopycatError, TypeError):
    code = "unsupported_layer"


class ImageReadError(CopycatError, OSError):
    code = "io_error"

    def __init__(self, refs):
        self.refs = list(refs)
        shown = ", ".join(self.refs[:10])
        more = "" if len(self.refs) <= 10 else f" (+{len(self.refs) - 10} more)"
        super().__init__(f"unreadable images: {shown}{more}")
