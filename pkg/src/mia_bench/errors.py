"""Exception types raised across the benchmark."""


class BenchError(Exception):
    """Base class for all benchmark errors."""


class DimensionError(BenchError, ValueError):
    pass


class EmptyBatchError(BenchError, ValueError):
    pass


class PartitionError(BenchError, ValueError):
    pass


class LengthError(BenchError, ValueError):
    pass


class TrainingDivergedError(BenchError, RuntimeError):
    pass


class PoolExhaustedError(BenchError, ValueError):
    pass


class DegenerateSetError(BenchError, ValueError):
    pass


class InfeasibleDistributionError(BenchError, ValueError):
    """A requested construction cannot be realized on the available groups.

    ``region`` names the deficient part of the construction (a bin, a side of
    a split threshold, a target level) and ``scenario_id`` is attached by the
    scenario pipeline when the failure happens while materializing one.
    """

    def __init__(self, message, region=None, scenario_id=None):
        super().__init__(message)
        self.region = region
        self.scenario_id = scenario_id

    def __str__(self):
        base = super().__str__()
        if self.scenario_id is not None:
            return f"[{self.scenario_id}] {base}"
        return base


class MissingContextError(BenchError, ValueError):
    pass


class NoDecisionsError(BenchError, ValueError):
    pass


class DegenerateTruthError(BenchError, ValueError):
    pass


class EmptyInputError(BenchError, ValueError):
    pass


class ConfigError(BenchError, ValueError):
    pass
