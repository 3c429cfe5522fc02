"""Dense float64 numerics: layer forward/backward passes, Adam, gradient checking."""

from budbreak.nn.adam import AdamState, adam_step
from budbreak.nn.gradcheck import FiniteDiffReport, finite_diff_check
from budbreak.nn.ops import (
    activation_backward,
    activation_forward,
    affine_backward,
    affine_forward,
    bce_loss,
    gru_cell_backward,
    gru_cell_forward,
    sigmoid,
)

__all__ = [
    "AdamState",
    "adam_step",
    "FiniteDiffReport",
    "finite_diff_check",
    "activation_backward",
    "activation_forward",
    "affine_backward",
    "affine_forward",
    "bce_loss",
    "gru_cell_backward",
    "gru_cell_forward",
    "sigmoid",
]
