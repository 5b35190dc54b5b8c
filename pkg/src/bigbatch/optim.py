"""SGD with momentum, weight decay, and step-decay schedules with warmup.

The learning-rate side implements the linear scaling rule: when the total
mini-batch grows by a factor k over the reference batch, the target rate
becomes k times the base rate, optionally approached through a linear
per-iteration warmup ramp. Two named decay policies are provided, "normal"
(decay by 0.1 at epochs 8 and 10, stop after 11) and "long" (0.1 at 11 and
14, a further 0.5 at 17, stop after 18).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BASE_BATCH = 16
BASE_LR = 0.02

NORMAL_MILESTONES = ((8, 0.1), (10, 0.1))
NORMAL_END_EPOCH = 11
LONG_MILESTONES = ((11, 0.1), (14, 0.1), (17, 0.5))
LONG_END_EPOCH = 18

DEFAULT_WARMUP_CAP = 500


class ScheduleError(ValueError):
    """Invalid learning-rate policy."""


class DivergenceError(FloatingPointError):
    """An update produced non-finite parameters or velocity."""


@dataclass(frozen=True)
class LRPolicy:
    base_lr: float
    actual_batch: int
    base_batch: int = BASE_BATCH
    warmup_iters: int = 0
    milestones: tuple = ()
    end_epoch: int = 1
    half_lr: bool = False

    def __post_init__(self):
        if self.base_batch <= 0 or self.actual_batch <= 0:
            raise ScheduleError(
                f"batch sizes must be positive, got base {self.base_batch}, "
                f"actual {self.actual_batch}")
        if self.base_lr <= 0:
            raise ScheduleError(f"base_lr must be positive, got {self.base_lr}")
        if self.warmup_iters < 0:
            raise ScheduleError("warmup_iters must be >= 0")
        if self.end_epoch <= 0:
            raise ScheduleError("end_epoch must be >= 1")
        last = -1
        for epoch, mult in self.milestones:
            if epoch <= last:
                raise ScheduleError("milestone epochs must be strictly increasing")
            if not 0.0 < mult <= 1.0:
                raise ScheduleError(f"milestone multiplier must be in (0, 1], got {mult}")
            last = epoch


def make_policy(name: str, actual_batch: int, base_lr: float = BASE_LR,
                base_batch: int = BASE_BATCH, warmup_iters: int = 0,
                half_lr: bool = False) -> LRPolicy:
    """The two named step-decay schedules, parameterized by batch size."""
    if name == "normal":
        milestones, end = NORMAL_MILESTONES, NORMAL_END_EPOCH
    elif name == "long":
        milestones, end = LONG_MILESTONES, LONG_END_EPOCH
    else:
        raise ScheduleError(f"unknown policy {name!r}, expected 'normal' or 'long'")
    return LRPolicy(base_lr=base_lr, actual_batch=actual_batch, base_batch=base_batch,
                    warmup_iters=warmup_iters, milestones=milestones,
                    end_epoch=end, half_lr=half_lr)


def default_warmup_iters(iters_per_epoch: int) -> int:
    """Default ramp length: 500 iterations or one epoch, whichever is shorter."""
    return min(DEFAULT_WARMUP_CAP, iters_per_epoch)


def scaled_target_lr(policy: LRPolicy) -> float:
    """Post-warmup plateau rate: (actual/base) * base_lr, halved on request."""
    lr = (policy.actual_batch / policy.base_batch) * policy.base_lr
    return 0.5 * lr if policy.half_lr else lr


def lr_at(policy: LRPolicy, epoch: int, iter_in_epoch: int, iters_per_epoch: int) -> float:
    """Effective rate at a given iteration.

    During warmup the rate ramps linearly from base_lr to the scaled
    target; from the iteration the ramp ends the value is exactly the
    target times the product of all milestone multipliers whose epoch has
    been reached.
    """
    if iters_per_epoch <= 0:
        raise ScheduleError("iters_per_epoch must be positive")
    global_iter = epoch * iters_per_epoch + iter_in_epoch
    if global_iter < 0:
        raise ScheduleError("iteration index must be nonnegative")
    r = policy.base_lr
    target = scaled_target_lr(policy)
    if global_iter < policy.warmup_iters:
        return r + (target - r) * (global_iter / policy.warmup_iters)
    # Milestones fold into the rate one by one (lr *= mult at each epoch
    # boundary passed), so a decayed value is exactly the product written
    # out left to right.
    lr = target
    for m_epoch, mult in policy.milestones:
        if m_epoch <= epoch:
            lr *= mult
    return lr


@dataclass
class SGDState:
    """Momentum buffers plus the decay hyperparameters.

    `decay_keys` names the parameters that receive the weight-decay term;
    by convention these are the weight matrices and kernels, never biases
    or normalization affines.
    """

    velocity: dict
    momentum: float
    weight_decay: float
    decay_keys: frozenset = field(default_factory=frozenset)

    @classmethod
    def create(cls, params: dict, momentum: float, weight_decay: float,
               decay_keys=None):
        if decay_keys is None:
            decay_keys = [k for k in params if k.endswith(".w")]
        return cls(
            velocity={k: np.zeros_like(v) for k, v in params.items()},
            momentum=momentum,
            weight_decay=weight_decay,
            decay_keys=frozenset(decay_keys),
        )


def sgd_step(params: dict, grads: dict, state: SGDState, lr: float) -> dict:
    """One momentum-SGD update, in place.

    g' = grad + wd * w on decay keys, v <- m * v + g', w <- w - lr * v.
    Any non-finite result aborts with DivergenceError rather than letting
    NaNs spread silently.
    """
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise ValueError(f"grads and params disagree on keys: {sorted(missing)}")
    if not np.isfinite(lr):
        raise DivergenceError(f"learning rate is non-finite: {lr}")
    for key in sorted(params):
        g = grads[key]
        w = params[key]
        if g.shape != w.shape:
            raise ValueError(f"{key}: grad shape {g.shape} != param shape {w.shape}")
        if key in state.decay_keys and state.weight_decay:
            g = g + state.weight_decay * w
        v = state.momentum * state.velocity[key] + g
        w_new = w - lr * v
        if not (np.isfinite(v).all() and np.isfinite(w_new).all()):
            raise DivergenceError(f"non-finite update for parameter {key!r}")
        state.velocity[key] = v
        params[key] = w_new
    return params


def accumulate_equivalence(params: dict, per_step_grads: list, r: float):
    """Both sides of the frozen-gradient identity behind linear scaling.

    Returns (stepwise, fused): `stepwise` applies k plain-SGD steps of rate
    r, one gradient each; `fused` applies a single step of rate k*r with
    the mean gradient. With zero momentum and fixed gradients the two
    agree to rounding error; re-evaluating gradients between steps (real
    training) is exactly what makes the rule approximate.
    """
    k = len(per_step_grads)
    if k == 0:
        raise ValueError("need at least one gradient")
    stepwise = {key: v.copy() for key, v in params.items()}
    for g in per_step_grads:
        for key in stepwise:
            stepwise[key] = stepwise[key] - r * g[key]
    fused = {}
    for key in params:
        mean_g = sum(g[key] for g in per_step_grads) / k
        fused[key] = params[key] - (k * r) * mean_g
    return stepwise, fused
