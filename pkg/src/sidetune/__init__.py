"""Desk-scale continual-learning lab built around additive side networks."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, const, param, primitive_forward
from .gradcheck import GradCheckReport, grad_check, grad_check_fn
from .merge import (
    AlphaCurriculum,
    AlphaParam,
    MergeOperator,
    alpha_value,
    build_merge,
    merge_forward,
    report_alpha,
)
from .nets import (
    InitScheme,
    LayerSpec,
    Network,
    NetworkSpec,
    ParamStore,
    build_network,
    count_params,
    init_side,
)
from .optim import OptimizerState, init_optimizer, optimizer_step
from .rng import Rng
from .strategies import (
    BoostStack,
    Metric,
    Strategy,
    TrainerConfig,
    TrainLog,
    boost_fit,
    build_strategy,
)
from .tasks import Dataset, SequenceSpec, TaskSpec

__all__ = [
    "AlphaCurriculum",
    "AlphaParam",
    "BoostStack",
    "Dataset",
    "GradCheckReport",
    "InitScheme",
    "LayerSpec",
    "MergeOperator",
    "Metric",
    "Network",
    "NetworkSpec",
    "OptimizerState",
    "ParamStore",
    "Rng",
    "SequenceSpec",
    "Strategy",
    "Tape",
    "TaskSpec",
    "Tensor",
    "TrainLog",
    "TrainerConfig",
    "alpha_value",
    "backward",
    "boost_fit",
    "build_merge",
    "build_network",
    "build_strategy",
    "const",
    "count_params",
    "grad_check",
    "grad_check_fn",
    "init_optimizer",
    "init_side",
    "merge_forward",
    "optimizer_step",
    "param",
    "primitive_forward",
    "report_alpha",
]
