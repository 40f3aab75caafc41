"""Shared exception hierarchy; the CLI maps these onto exit codes."""


class SpeechCLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SpeechCLError):
    """Bad configuration or usage (CLI exit code 1)."""


class DataError(SpeechCLError):
    """Bad or unusable input data (CLI exit code 2)."""


class CheckpointError(DataError):
    """Malformed, corrupt, or incompatible checkpoint."""


class TaskError(ConfigError):
    """Unknown task id, duplicate registration, or strategy misuse."""
