"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CrackBenchError(Exception):
    exit_code = 3


class UsageError(CrackBenchError):
    exit_code = 1


class DataError(CrackBenchError):
    exit_code = 2


class ConfigurationError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class WeightStoreError(DataError):
    pass


class TrainingError(CrackBenchError):
    exit_code = 3

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
