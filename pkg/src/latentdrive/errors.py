"""Exception types shared across the package."""


class InputDomainError(ValueError):
    """A numeric input lies outside the domain an operation accepts."""


class ConfigError(ValueError):
    """A configuration value failed validation.

    ``key`` holds the dotted path of the offending entry when known.
    """

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class ContractViolation(RuntimeError):
    """An operation was called in a state its protocol forbids."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read or does not match the expected network."""
