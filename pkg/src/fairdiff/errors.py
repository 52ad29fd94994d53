"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class FairDiffError(Exception):
    exit_code = 1


class ConfigError(FairDiffError, ValueError):
    exit_code = 2


class InvalidHyperparameter(ConfigError):
    pass


class DataError(FairDiffError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class EmptyDatasetError(DataError):
    pass


class DegenerateCatalogError(DataError):
    pass


class InvalidDistribution(FairDiffError, ValueError):
    pass


class RejectedInput(FairDiffError, ValueError):
    pass


class UndefinedMetric(FairDiffError, ValueError):
    pass


class TrainingDivergence(FairDiffError, RuntimeError):
    exit_code = 4

    def __init__(self, message, layer=None, step=None):
        self.layer = layer
        self.step = step
        super().__init__(message)


class GuidanceBlowup(TrainingDivergence):
    pass


class IncompatibilityError(FairDiffError):
    exit_code = 5


class CheckpointError(IncompatibilityError):
    pass
