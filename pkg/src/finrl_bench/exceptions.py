from typing import Optional


class BenchException(Exception):
    """Root of all exceptions raised by finrl-bench.
    """
    pass


class DataException(BenchException):
    """Market or signal data could not be used as given.
    """
    pass


class DataParseException(DataException):
    """A row of an input file could not be parsed.
    """

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DuplicateKeyException(DataException):
    """The same (timestamp, asset) pair occurs more than once.
    """
    pass


class EmptyDatasetException(DataException):
    """No rows are left after cleaning.
    """
    pass


class UnknownIndicatorException(DataException):
    """An indicator name is not supported.
    """
    pass


class WarmupException(DataException):
    """Not enough history to compute an indicator.
    """

    def __init__(self, indicator: str, required: int, available: int):
        super().__init__(
            f"indicator '{indicator}' needs more than {required} bars, got {available}"
        )
        self.indicator = indicator
        self.required = required
        self.available = available


class AlignmentException(DataException):
    """Signals and market data do not overlap in time.
    """
    pass


class EnvironmentException(BenchException):
    """Misuse of a trading environment.
    """
    pass


class InvalidActionException(EnvironmentException):
    """The action is non-finite, has the wrong shape or is not an allowed level.
    """
    pass


class EpisodeDoneException(EnvironmentException):
    """step() was called after the episode ended.
    """
    pass


class InvariantViolationException(EnvironmentException):
    """Balance or holdings became negative.
    """
    pass


class TrainingException(BenchException):
    """Generic training failure.
    """
    pass


class DivergenceException(TrainingException):
    """A loss or a parameter became non-finite.
    """
    pass


class ProtocolViolationException(BenchException):
    """A frozen agent was asked to train, e.g. during backtest evaluation.
    """
    pass


class UndefinedMetricException(BenchException):
    """A ratio has a zero denominator.
    """
    pass


class ConfigException(BenchException):
    """The run configuration is invalid. Holds every problem found, not just the first.
    """

    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors
