EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


class LongicauseError(Exception):
    """Base exception; carries the process exit code the CLI reports."""

    exit_code: int = EXIT_VALIDATION

    def __init__(self, detail: str = "longicause error"):
        self.detail = detail
        super().__init__(detail)


class ValidationError(LongicauseError):
    """Exception raised when an input violates a documented contract."""

    def __init__(self, detail: str = "Validation failed"):
        super().__init__(detail=detail)


class ConfigurationError(ValidationError):
    """Exception raised for invalid or unknown configuration keys."""

    def __init__(self, detail: str = "Invalid configuration"):
        super().__init__(detail=detail)


class DatasetFormatError(ValidationError):
    """Exception raised when a panel file or sidecar is malformed."""

    def __init__(self, detail: str = "Malformed dataset"):
        super().__init__(detail=detail)


class ConsistencyViolationError(DatasetFormatError):
    """Exception raised when observed outcomes disagree with the potential outcomes."""

    def __init__(self, detail: str = "consistency violation"):
        super().__init__(detail=detail)


class SplitError(ValidationError):
    """Exception raised when a split cannot be produced."""

    def __init__(self, detail: str = "Cannot split dataset"):
        super().__init__(detail=detail)


class EmptySelectionError(ValidationError):
    """Exception raised when an operation receives an empty unit index."""

    def __init__(self, detail: str = "Empty unit selection"):
        super().__init__(detail=detail)


class PropensityRangeError(ValidationError):
    """Exception raised when a propensity lies outside the open unit interval."""

    def __init__(self, detail: str = "Propensity outside (0, 1)"):
        super().__init__(detail=detail)


class KernelError(ValidationError):
    """Exception raised when a transport kernel has non-positive entries."""

    def __init__(self, detail: str = "Kernel entries must be strictly positive"):
        super().__init__(detail=detail)


class DegenerateGroundTruthError(ValidationError):
    """Exception raised when a normalised metric has a zero denominator."""

    def __init__(self, detail: str = "degenerate ground truth"):
        super().__init__(detail=detail)


class NumericFailureError(LongicauseError):
    """Exception raised when a computation produces non-finite numbers."""

    exit_code = EXIT_NUMERIC

    def __init__(self, detail: str = "Numeric failure"):
        super().__init__(detail=detail)


class NonFiniteLossError(NumericFailureError):
    """Exception raised when a loss term is NaN or infinite."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(detail=detail or f"non-finite loss term: {term}")


class SimulationOverflowError(NumericFailureError):
    """Exception raised when a simulator trajectory overflows."""

    def __init__(self, detail: str = "Simulation overflow"):
        super().__init__(detail=detail)
