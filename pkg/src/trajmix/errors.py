"""Exception types shared across the toolkit.

The CLI maps these onto stable exit codes: ConfigError -> 2, data errors
(DatasetError and subclasses) -> 3, NumericalError -> 4.
"""


class TrajmixError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TrajmixError):
    """Invalid configuration values (bad probabilities, fractions, paths)."""


class DatasetError(TrajmixError):
    """Problems with dataset content or availability."""


class EmptyDatasetError(DatasetError):
    """An operation that requires samples received none."""


class DatasetParseError(DatasetError):
    """A dataset or sample file failed to parse.

    Carries the 1-based line number when the failure is line-local.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingCheckpointError(DatasetError):
    """A required model checkpoint file is absent."""


class NumericalError(TrajmixError):
    """Numerical failure during computation or training."""


class NaNLossError(NumericalError):
    """The training loss became non-finite."""


class RankDeficientError(NumericalError):
    """Least-squares projection hit a rank-deficient basis matrix."""


class ShapeMismatchError(TrajmixError):
    """Array or vector dimensions disagree with the model contract."""


class StaleCacheError(TrajmixError):
    """A backward pass received a cache inconsistent with its gradients."""


class HorizonOutOfRangeError(TrajmixError):
    """A requested horizon is not covered by the trajectory or model."""


class MismatchedChildSetsError(TrajmixError):
    """Two models compared for information gain differ in more than one child."""
