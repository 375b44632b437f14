"""Elastic vision FFN: capacity-constrained two-expert routing on a micro-transformer.

The package provides a small 64-bit reverse-mode tensor core, the routing and
token-allocation machinery (Random / GBPR / Img-GBPR with optional reject
redistribution), the duplicate-and-freeze stage-3 layer surgery, a packed
multimodal micro-transformer with a synthetic key-permutation task, and an
experiment CLI (``evf``).
"""

from .errors import (
    ConfigError,
    ContractError,
    EvfError,
    FixtureError,
    NumericError,
    ShapeError,
    UnstableInstanceError,
)
from .seeds import RngKey
from .tensor import Parameter, Tensor, backward, zero_grads
from .router import LANGUAGE_FFN, VISION_FFN, RouterParams, RoutingDecision, route
from .allocator import (
    AllocationPlan,
    AllocationStats,
    CapacityConfig,
    ModalityTags,
    PriorityScores,
    Strategy,
    allocate,
    allocation_stats,
    compute_capacity,
    priority_scores,
    redistribute,
)
from .layer import (
    EvfLayerParams,
    FfnParams,
    LayerTelemetry,
    ffn_forward,
    forward_language_only,
    forward_multimodal,
    init_stage3_from_dense,
)
from .training import (
    AdamW,
    GradCheckReport,
    LossBreakdown,
    OptimizerConfig,
    StageSchedule,
    aux_loss,
    combined_digest,
    grad_check,
    learning_rate_at,
    parameter_digests,
    regressive_loss,
    tensor_digest,
    total_loss,
)
from .model import (
    MicroModel,
    ModelConfig,
    SequenceSample,
    SyntheticTask,
    TokenBatch,
    TrainConfig,
    build_model,
    compute_loss,
    enter_stage3,
    forward,
    train,
)
from .checkpoint import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AllocationPlan",
    "AllocationStats",
    "CapacityConfig",
    "ConfigError",
    "ContractError",
    "EvfError",
    "EvfLayerParams",
    "FfnParams",
    "FixtureError",
    "GradCheckReport",
    "LANGUAGE_FFN",
    "LayerTelemetry",
    "LossBreakdown",
    "MicroModel",
    "ModalityTags",
    "ModelConfig",
    "NumericError",
    "OptimizerConfig",
    "Parameter",
    "PriorityScores",
    "RngKey",
    "RouterParams",
    "RoutingDecision",
    "SequenceSample",
    "ShapeError",
    "StageSchedule",
    "Strategy",
    "SyntheticTask",
    "Tensor",
    "TokenBatch",
    "TrainConfig",
    "UnstableInstanceError",
    "VISION_FFN",
    "allocate",
    "allocation_stats",
    "aux_loss",
    "backward",
    "build_model",
    "combined_digest",
    "compute_capacity",
    "compute_loss",
    "enter_stage3",
    "ffn_forward",
    "forward",
    "forward_language_only",
    "forward_multimodal",
    "grad_check",
    "init_stage3_from_dense",
    "learning_rate_at",
    "load_model",
    "parameter_digests",
    "priority_scores",
    "redistribute",
    "regressive_loss",
    "route",
    "save_model",
    "tensor_digest",
    "total_loss",
    "train",
    "zero_grads",
]
