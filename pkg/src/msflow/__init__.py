"""Multi-scale recurrent optical flow estimation.

A coarse-to-fine estimator with a shared recurrent matching block,
U-Net-style multi-scale features, pooled correlation pyramids with bounded
lookup, learned 2x convex upsampling, and an exponentially weighted
multi-scale multi-iteration loss with a sample-wise robust variant.
"""

from .config import (
    ConfigError,
    IterationSchedule,
    LossConfig,
    ModelConfig,
    load_configs,
    validate_config,
)
from .data import FlowSample, SyntheticSpec, flow_to_color, generate, read_flo, write_flo
from .losses import LossSchedule, epe, fl_rate, per_iteration_loss, schedule_weights, total_loss
from .pipeline import EstimationTrace, MultiScaleFlowNet, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EstimationTrace",
    "FlowSample",
    "IterationSchedule",
    "LossConfig",
    "LossSchedule",
    "ModelConfig",
    "MultiScaleFlowNet",
    "SyntheticSpec",
    "epe",
    "fl_rate",
    "flow_to_color",
    "generate",
    "load_checkpoint",
    "load_configs",
    "per_iteration_loss",
    "read_flo",
    "save_checkpoint",
    "schedule_weights",
    "total_loss",
    "validate_config",
    "write_flo",
]
