"""
Error hierarchy for the SLGrad laboratory.
"""


class SLGradError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SLGradError, ValueError):
    """Fatal configuration error: bad shapes, unknown tags, invalid spec values."""


class DivergenceError(SLGradError, RuntimeError):
    """A training loss became non-finite or exceeded the divergence threshold."""

    def __init__(self, step: int, value: float, threshold: float):
        self.step = step
        self.value = value
        self.threshold = threshold
        super().__init__(f"loss {value!r} at step {step} exceeds divergence threshold {threshold:g}")
