"""Central-difference gradient oracle.

``f`` is a zero-argument callable closing over the parameter tensors; it must
be deterministic (fix any rng draws and masks before calling). Parameters are
perturbed in place coordinate by coordinate, so ``f`` has to read ``p.data``
live rather than caching copies.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from sonomim.autodiff.tensor import AutodiffError, Tape, Tensor, backward


class NonFiniteLoss(ArithmeticError):
    pass


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error measure per coordinate is |a - n| / max(1e-8, |a| + |n|).
    With ``max_coords_per_tensor`` set, a deterministic random subset of
    coordinates is probed in every tensor (all coordinates otherwise).
    """
    if eps == 0:
        raise ValueError("eps must be nonzero")
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise AutodiffError("finite_diff_check needs a scalar objective")
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss("objective is non-finite at the expansion point")
    grads = backward(loss, tape)

    if max_coords_per_tensor is not None and rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for p in params:
        analytic = grads.raw(p).reshape(-1) if p in grads else np.zeros(p.size)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is None or n <= max_coords_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(f().data.reshape(()))
            flat[c] = orig - eps
            fm = float(f().data.reshape(()))
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteLoss("objective went non-finite during probing")
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[c])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
