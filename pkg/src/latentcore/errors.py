"""Exception hierarchy shared by the library and the CLI."""


class LatentCoreError(Exception):
    """Base class for all library errors."""

    category = "error"


class DimensionMismatchError(LatentCoreError, ValueError):
    category = "shape"


class ModeIndexError(LatentCoreError, IndexError):
    category = "shape"


class RankError(LatentCoreError, ValueError):
    category = "config"


class SVDError(LatentCoreError, RuntimeError):
    category = "numeric"

    def __init__(self, mode, message="SVD did not converge"):
        super().__init__(f"mode {mode}: {message}")
        self.mode = mode


class FrozenParameterError(LatentCoreError, RuntimeError):
    category = "freeze"


class UnknownTaskError(LatentCoreError, KeyError):
    category = "task"

    def __str__(self):
        return f"unknown task: {self.args[0]!r}"


class ConfigError(LatentCoreError, ValueError):
    category = "config"


class DivergenceError(LatentCoreError, RuntimeError):
    category = "numeric"


class CheckpointError(LatentCoreError):
    category = "checkpoint"


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass
