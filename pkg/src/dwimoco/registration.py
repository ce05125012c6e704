"""Inner-loop optimizer: fit per-b-value displacement fields to the objective.

The fields are optimized directly (one dense 3-vector per voxel per b-value)
with a self-contained Adam implementation.  Whenever the total loss rises
relative to the previous step the learning rate is divided by a fixed factor.
The best-visited state is returned, so the final loss never exceeds the
initial one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .objective import LossWeights, loss_and_gradient
from .signal_model import DEFAULT_FLOOR_EPS
from .volume import BValueSeries, DimensionMismatchError, DisplacementField, RoiMask


@dataclass(frozen=True)
class InnerOptConfig:
    """Adam settings for one registration pass.

    The learning rate is in voxels per step since the parameters are raw
    displacements.  plateau_window/plateau_rel_tol stop the loop early once
    the best-seen loss stagnates; set plateau_window = 0 to disable.
    """

    learning_rate: float = 0.1
    lr_drop_factor: float = 10.0
    max_inner_steps: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_window: int = 10
    plateau_rel_tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must be > 1")
        if self.max_inner_steps < 0:
            raise ValueError("max_inner_steps must be >= 0")


class DivergedError(RuntimeError):
    """Non-finite loss or gradient; carries the loss trace seen so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class AdamResult:
    x: np.ndarray
    loss: float
    trace: list
    steps: int = 0
    lr_final: float = 0.0
    lr_drops: int = 0


def adam_minimize(value_and_grad, x0: np.ndarray, cfg: InnerOptConfig) -> AdamResult:
    """Minimize a scalar function of a flat parameter vector with Adam.

    value_and_grad(x) must return (loss, grad, aux); aux is recorded in the
    trace.  On a step whose loss exceeds the previous step's loss, the
    learning rate is divided by cfg.lr_drop_factor (once per offending
    step).  Returns the lowest-loss visited state.
    """
    x = np.array(x0, dtype=np.float64).ravel()
    loss, grad, aux = value_and_grad(x)
    trace = [aux]
    if not np.isfinite(loss) or not np.isfinite(grad).all():
        raise DivergedError("diverged: non-finite initial loss or gradient", trace)
    best_x = x.copy()
    best_loss = loss
    best_history = [best_loss]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    lr = cfg.learning_rate
    lr_drops = 0
    prev_loss = loss
    steps = 0
    for t in range(1, cfg.max_inner_steps + 1):
        _kernels.adam_update(
            x, grad.ravel(), m, v, lr,
            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
            1.0 - cfg.adam_beta1**t, 1.0 - cfg.adam_beta2**t,
        )
        loss, grad, aux = value_and_grad(x)
        trace.append(aux)
        steps = t
        if not np.isfinite(loss) or not np.isfinite(grad).all():
            raise DivergedError(f"diverged: non-finite loss or gradient at step {t}", trace)
        if loss > prev_loss:
            lr /= cfg.lr_drop_factor
            lr_drops += 1
        if loss < best_loss:
            best_loss = loss
            best_x[:] = x
        prev_loss = loss
        best_history.append(best_loss)
        if cfg.plateau_window > 0 and t >= cfg.plateau_window:
            gain = best_history[t - cfg.plateau_window] - best_loss
            if gain <= cfg.plateau_rel_tol * max(abs(best_loss), np.finfo(float).tiny):
                break
    return AdamResult(best_x, best_loss, trace, steps, lr, lr_drops)


def optimize_fields(
    fixed: BValueSeries,
    moving: BValueSeries,
    init_fields,
    maps,
    roi: RoiMask,
    weights: LossWeights,
    cfg: InnerOptConfig,
    floor_eps: float = DEFAULT_FLOOR_EPS,
    normalize_smooth: bool = True,
):
    """Find per-b-value displacement fields minimizing the total loss.

    Each b-value image of `moving` is registered to the same-b image of
    `fixed`; all B fields are optimized jointly.  With weights.alpha2 == 0
    the parameter maps are never read.  Returns (fields, trace) where trace
    is the per-step LossBreakdown list and fields is the best-visited state.

    Raises DivergedError (with the partial trace attached) if the loss or
    gradient goes non-finite.
    """
    if fixed.dims != moving.dims:
        raise DimensionMismatchError("fixed and moving dims differ")
    init_fields = list(init_fields)
    if len(init_fields) != moving.b_count:
        raise DimensionMismatchError("need one init field per b-value")
    dims = moving.dims
    shape = (moving.b_count,) + dims + (3,)
    x0 = np.stack([f.data for f in init_fields]).reshape(-1)

    def value_and_grad(x):
        fields_arr = x.reshape(shape)
        bd, grad = loss_and_gradient(
            fixed, moving, fields_arr, maps, roi, weights,
            floor_eps, normalize_smooth,
        )
        return bd.total, grad.reshape(-1), bd

    res = adam_minimize(value_and_grad, x0, cfg)
    best = res.x.reshape(shape)
    fields = [DisplacementField(best[i].copy()) for i in range(moving.b_count)]
    return fields, res.trace
