"""Exception types shared across the package."""


class NeedlePlanError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(NeedlePlanError, ValueError):
    """Bad argument (dimension mismatch, unknown action, missing gate)."""


class InsufficientDataError(NeedlePlanError):
    """Not enough samples/rows to fit the requested model."""


class DegenerateWeightsError(NeedlePlanError):
    """All sample weights are zero (or underflowed), nothing to refit."""


class InfeasibilityError(NeedlePlanError):
    """Rejection sampling exhausted its budget without M valid samples."""

    def __init__(self, msg, rejection_rate=None, iteration=None):
        super().__init__(msg)
        self.rejection_rate = rejection_rate
        self.iteration = iteration


class SegmentationError(NeedlePlanError):
    """Demonstration trace is inconsistent with the level it references."""


class ConfigurationError(NeedlePlanError):
    """A required skill or setting is missing."""


class GenerationError(NeedlePlanError):
    """Level generation exhausted its retry budget."""


class ParseError(NeedlePlanError):
    """Malformed level/demonstration/model file."""

    def __init__(self, msg, field=None):
        super().__init__(msg)
        self.field = field


class PlanError(NeedlePlanError):
    """A per-action optimization failed; carries partial results."""

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial
