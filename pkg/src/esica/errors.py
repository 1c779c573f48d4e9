"""Exception hierarchy shared across the package."""


class EsicaError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EsicaError, ValueError):
    """Invalid static configuration (kernel sizes, head counts, config keys)."""


class ContractError(EsicaError, ValueError):
    """A runtime argument violates an operation's shape/value contract."""


class InputError(EsicaError, ValueError):
    """User-supplied data is unusable (empty prompt, unknown prompt, ...)."""


class EvaluationError(EsicaError, ArithmeticError):
    """A function evaluated to a non-finite value."""


class FormatError(EsicaError):
    """A serialized file is malformed, truncated, or has a bad magic."""


class SamplingError(EsicaError):
    """Patch sampling could not satisfy the requested quota."""


class GenerationError(EsicaError):
    """Synthetic data generation failed (e.g. impossible packing)."""


class TrainingError(EsicaError):
    """Training aborted, typically on a non-finite loss."""
