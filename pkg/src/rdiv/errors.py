"""Exception hierarchy shared across the package."""


class RdivError(Exception):
    """Base class; ``category`` is the machine-readable kind used by the CLI."""

    category = "error"


class InvalidArgumentError(RdivError, ValueError):
    category = "invalid-argument"


class DimensionMismatchError(InvalidArgumentError):
    category = "dimension-mismatch"


class UnsupportedError(RdivError, NotImplementedError):
    category = "unsupported"


class InvalidParameterError(InvalidArgumentError):
    category = "invalid-parameter"


class TrainingDivergedError(RdivError, FloatingPointError):
    category = "training-diverged"

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class ConfigError(RdivError):
    category = "config"


class ConfigMissingError(ConfigError, FileNotFoundError):
    category = "config-missing"


class ConfigSyntaxError(ConfigError):
    category = "config-syntax"

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class ConfigKeyError(ConfigError, KeyError):
    category = "config-unknown-key"

    def __init__(self, key):
        self.key = key
        super().__init__(f"unknown key {key!r}")

    def __str__(self):
        return self.args[0]


class ConfigInvariantError(ConfigError, ValueError):
    category = "config-invariant"

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
