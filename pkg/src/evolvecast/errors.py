"""Exception and warning types raised across the package."""


class EvolveCastError(Exception):
    """Base class for all package errors."""


# graph
class InvalidPeriodSequence(EvolveCastError):
    pass


class UnknownNode(EvolveCastError):
    pass


class InvalidGraph(EvolveCastError):
    pass


class DegenerateDistances(UserWarning):
    """All edge distances are identical; the kernel width falls back to 1."""


# tensors
class ShapeError(EvolveCastError, ValueError):
    pass


class NonScalarLoss(EvolveCastError):
    pass


class NonFiniteError(EvolveCastError, FloatingPointError):
    pass


class ReceptiveFieldWarning(UserWarning):
    pass


class CheckpointError(EvolveCastError):
    pass


# model
class ConfigError(EvolveCastError, ValueError):
    pass


# continual
class EmptyWindow(EvolveCastError):
    pass


class BinMismatch(EvolveCastError):
    pass


class InsufficientHistory(EvolveCastError):
    pass


class CapacityError(EvolveCastError):
    pass


class EmptyTrainingSet(EvolveCastError):
    pass


# training
class EmptyFisherData(EvolveCastError):
    pass


class ParameterMismatch(EvolveCastError):
    pass


# data
class MissingArtifact(EvolveCastError):
    def __init__(self, path):
        super().__init__(f"missing artifact: {path}")
        self.path = path


class FormatError(EvolveCastError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ScenarioError(EvolveCastError):
    pass


class ZeroVarianceWarning(UserWarning):
    pass


# metrics
class UndefinedMetric(EvolveCastError):
    pass


_MODULE_OF = {
    "graph_core": (InvalidPeriodSequence, UnknownNode, InvalidGraph),
    "tensor_autodiff": (ShapeError, NonScalarLoss, NonFiniteError, CheckpointError),
    "config": (ConfigError,),
    "continual": (EmptyWindow, BinMismatch, InsufficientHistory, CapacityError, EmptyTrainingSet),
    "training": (EmptyFisherData, ParameterMismatch),
    "data_io": (MissingArtifact, FormatError, ScenarioError),
    "cli_eval": (UndefinedMetric,),
}


def module_tag(exc: BaseException) -> str:
    """Name of the package area an error originates from."""
    for tag, classes in _MODULE_OF.items():
        if isinstance(exc, classes):
            return tag
    return "evolvecast"
