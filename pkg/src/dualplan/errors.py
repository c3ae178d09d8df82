"""Exception hierarchy.

Every error raised by the library derives from :class:`DualPlanError`, which
carries the name of the module that raised it so the CLI can report
``<module>: <variant>: <message>``.
"""


class DualPlanError(Exception):
    module = "dualplan"

    @property
    def variant(self) -> str:
        return type(self).__name__


# geometry
class InvalidGeometry(DualPlanError):
    module = "core_types"


class HorizonExceeded(DualPlanError):
    module = "core_types"


class InvalidCommand(DualPlanError):
    module = "core_types"


# tensor / autograd
class ShapeError(DualPlanError):
    module = "tensor_autograd"


class NumericsError(DualPlanError):
    module = "tensor_autograd"


class OptimizerError(DualPlanError):
    module = "tensor_autograd"


class FrozenParameterError(DualPlanError):
    module = "tensor_autograd"


class CheckpointError(DualPlanError):
    module = "tensor_autograd"


# trajectory bank
class BankBuildError(DualPlanError):
    module = "trajectory_bank"


class ModelNotReady(DualPlanError):
    module = "trajectory_bank"


# compressor / training
class StageOrderError(DualPlanError):
    module = "query_compressor"


# planners
class InvalidCandidates(DualPlanError):
    module = "tcot_planner"


# synergy
class ClockError(DualPlanError):
    module = "synergy"


# evaluation / data
class DataError(DualPlanError):
    module = "evaluation"


class ConfigError(DualPlanError):
    module = "scenario"


class OutOfRange(DualPlanError):
    module = "scenario"


class FormatError(DualPlanError):
    module = "scenario"
