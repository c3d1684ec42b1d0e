"""Subspace-gated steering of a small frozen transformer."""

from .placement import PlacementDecision, select_position
from .steering import SteeringModule, TrainConfig, init_steering, intervene, train
from .subspace import (
    ActivationBank,
    AlignedSubspace,
    ExtractionConfig,
    SubspaceBasis,
    build_aligned,
    energy_rank,
    extract_private,
    extract_shared,
    extract_subspaces,
    principal_angles,
)
from .tensorcore import Tape, backward, grad_check, svd
from .toymodel import FrozenModel, ModelConfig, forward_capture, forward_intervene, init_model

__version__ = "0.1.0"
