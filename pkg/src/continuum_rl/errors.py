"""Exception hierarchy shared across the package."""


class ContinuumRLError(Exception):
    pass


class ConfigError(ContinuumRLError, ValueError):
    """Bad configuration key or value. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class PlantRangeError(ContinuumRLError, ValueError):
    """Cable differential outside the admissible bend range."""

    def __init__(self, message, axis):
        super().__init__(message)
        self.axis = axis


class DomainError(ContinuumRLError, ValueError):
    pass


class EnvironmentFault(ContinuumRLError, RuntimeError):
    """Transport failure while talking to a remote plant."""


class MissingArtifact(ContinuumRLError, FileNotFoundError):
    pass
