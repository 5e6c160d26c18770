"""Shared Gaussian latent space partitioned into per-sample zones via
closed-form flow matching, with a differentiable alignment objective."""

from .alignment import AlignmentConfig, Pairing, align_loss, assignment_prob
from .flow import (
    FULL_TAPE,
    RECOMPUTE,
    AnchorSet,
    FlowConfig,
    Trajectory,
    assign_zone,
    assign_zones,
    compute_latents,
    integrate_backward,
    integrate_forward,
    uniform_grid,
    velocity,
)
from .gradcheck import grad_check
from .models import (
    LabelCodebook,
    MlpEncoder,
    RectifiedFlowDecoder,
    label_decode,
    label_encode,
    one_hot,
    rf_loss,
    rf_reconstruct,
    rf_sample,
)
from .tensor import Tape, Tensor, backward, no_grad
from .training import (
    CheckpointPolicy,
    MetricLog,
    TrainConfig,
    TrainingDiverged,
    classify,
    generate,
    joint_loss,
    train_baseline_rf,
    train_joint,
    train_representation,
    train_unconditional,
)

__all__ = [name for name in dir() if not name.startswith("_")]
