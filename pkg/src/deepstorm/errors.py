"""Exception types. The CLI maps each category to its own exit code."""


class DeepstormError(Exception):
    exit_code = 1


class ConfigError(DeepstormError, ValueError):
    """Invalid experiment, schedule or estimator configuration."""

    exit_code = 2


class TopologyError(ConfigError):
    pass


class DivergenceError(DeepstormError, FloatingPointError):
    """Iterates became non-finite or exceeded the divergence guard."""

    exit_code = 3


class CheckpointError(DeepstormError):
    exit_code = 4
