"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: usage errors exit 2, numerical
failures exit 3, I/O failures exit 4.
"""


class SplitstreamError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SplitstreamError):
    """Invalid parameters, dimension mismatches, malformed configs."""


class NumericalError(SplitstreamError):
    """Base class for runtime numerical failures."""


class IntegrationBlowupError(NumericalError):
    """A trajectory produced a non-finite value.

    Carries the step index at which the blow-up was detected so the
    offending realization can be reported.
    """

    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(message or f"non-finite state at step {step_index}")


class DegeneratePerturbationError(NumericalError):
    """Benettin separation collapsed to exactly zero."""


class DegeneratePathError(NumericalError):
    """Target-path construction hit a zero ensemble-mean QoI at final time."""


class WeightsLoadError(SplitstreamError):
    """Generator weights file failed validation (tiling, checksum, vocabulary)."""


class InferenceError(SplitstreamError):
    """Shape mismatch or similar failure during generator forward pass."""


class StrategyError(SplitstreamError):
    """A cloning strategy could not produce the requested clones."""
