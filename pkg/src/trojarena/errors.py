"""Error taxonomy shared across modules.

The CLI maps these onto exit codes (config 2, missing artifact 3, numeric
4, gate 5), so library code should raise the most specific one that applies
instead of a bare ValueError.
"""


class TrojArenaError(Exception):
    """Base class for package errors."""


class ConfigError(TrojArenaError):
    """Invalid configuration, spec values, or file contents."""


class MissingArtifactError(TrojArenaError):
    """A referenced checkpoint/dataset/report does not exist."""


class NumericError(TrojArenaError):
    """NaN/Inf parameters, divergence, or a failed numeric invariant."""


class GateError(TrojArenaError):
    """An end-of-run acceptance gate did not hold."""
