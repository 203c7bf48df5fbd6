"""Exception hierarchy shared across the pipeline."""


class ForgeError(Exception):
    """Base class for all package errors."""


class ContractViolation(ForgeError):
    """An operation was called with inputs that break its preconditions."""


class ConfigError(ForgeError):
    """A configuration value violates its invariants or schema."""


class DependencyError(ForgeError):
    """A pipeline stage is missing artifacts from an upstream stage."""

    def __init__(self, message, required_stage=None):
        super().__init__(message)
        self.required_stage = required_stage


class StaleArtifactError(DependencyError):
    """Existing stage artifacts were produced under a different config."""


class TrainingDiverged(ForgeError):
    """A training loop produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class VolumeFormatError(ForgeError):
    """Base class for volume container read errors."""


class BadHeaderError(VolumeFormatError):
    """Header is too short, has a wrong magic, or an unknown dtype code."""


class BadShapeError(VolumeFormatError):
    """Header declares a shape with a zero or absurd dimension."""


class BadPayloadError(VolumeFormatError):
    """Payload size does not match the header's shape and dtype."""


class DtypeMismatchError(VolumeFormatError):
    """File holds a different kind of grid than the caller asked for."""
