from sonomim.autodiff import ops
from sonomim.autodiff.gradcheck import NonFiniteLoss, finite_diff_check
from sonomim.autodiff.tensor import (
    AutodiffError,
    GradMap,
    Tape,
    Tensor,
    active_tape,
    backward,
)

__all__ = [
    "AutodiffError",
    "GradMap",
    "NonFiniteLoss",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "finite_diff_check",
    "ops",
]
