"""Batch normalization, local and synchronized across a device group.

The cross-device variant aggregates statistics over a normalization
sub-group with two collective rounds: per-device sums are reduced to the
group mean, then per-device squared deviations are reduced to the group
variance, and each device normalizes its own shard. Its defining property
is concat-equivalence: the result equals local batch norm applied to the
rank-ordered concatenation of all shards.

A one-pass variant (single reduction of sums, squared sums, and counts) is
available behind a flag; it saves a collective round at the cost of the
classic cancellation hazard in ``E[x^2] - E[x]^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collectives import SCOPE_BN_GROUP, DeviceHandle, allreduce_sum
from .tensor import (
    Tensor,
    TensorError,
    _channels_last_rows,
    channel_affine,
    channel_sum,
    sequential_sum_rows,
)


class BatchNormError(ValueError):
    """Invalid state, layout, or cache for a batch-norm operation."""


@dataclass
class BNLayerState:
    """Per-channel affine parameters plus running statistics.

    `running_momentum` is the fraction of the batch statistic blended into
    the running estimate each training step (0 freezes the statistics, 1
    replaces them outright).
    """

    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    running_momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, running_momentum: float = 0.1):
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            eps=eps,
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            running_momentum=running_momentum,
        )

    def __post_init__(self):
        c = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)
        self.validate()

    def validate(self):
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise BatchNormError(f"{name} must have length {c}")
        if not self.eps > 0:
            raise BatchNormError(f"eps must be positive, got {self.eps}")
        if np.any(self.running_var < 0):
            raise BatchNormError("running_var must be elementwise nonnegative")
        if not 0.0 <= self.running_momentum <= 1.0:
            raise BatchNormError(
                f"running_momentum must lie in [0, 1], got {self.running_momentum}"
            )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BNForwardCache:
    """Values saved by a training-mode forward pass for the backward pass.

    `total_count` is the number of scalar elements per channel that the
    statistics were reduced over, across the whole normalization group.
    """

    x_hat: Tensor
    mu: np.ndarray
    var: np.ndarray
    total_count: int
    train: bool
    scope_key: str | None = None  # None for a purely local forward


def _check_layout(x: Tensor, state: BNLayerState):
    if len(x.shape) not in (2, 4):
        raise BatchNormError(f"expected layout (N,C) or (N,C,H,W), got shape {x.shape}")
    if x.shape[1] != state.channels:
        raise BatchNormError(
            f"input has {x.shape[1]} channels but state has {state.channels}"
        )


def _train_forward(x: Tensor, state: BNLayerState, reduce_vec, scope_key,
                   one_pass: bool) -> tuple[Tensor, BNForwardCache]:
    c = state.channels
    local = channel_sum(x, with_sum_sq=one_pass)
    if one_pass:
        packed = np.concatenate([local.sum, local.sum_sq, [float(local.count)]])
        total = reduce_vec(packed)
        s, ssq, m = total[:c], total[c:2 * c], total[2 * c]
        mu = s / m
        var = np.maximum(ssq / m - mu * mu, 0.0)
    else:
        packed = np.concatenate([local.sum, [float(local.count)]])
        total = reduce_vec(packed)
        s, m = total[:c], total[c]
        mu = s / m
        diff = x.array - mu.reshape((1, c) + (1,) * (len(x.shape) - 2))
        dev_var_sum = sequential_sum_rows(_channels_last_rows(diff * diff))
        var = reduce_vec(dev_var_sum) / m
    m_int = int(round(m))
    if m_int < 2:
        raise BatchNormError(
            f"training-mode statistics need at least 2 elements per channel, got {m_int}"
        )
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = channel_affine(x, inv_std, -mu * inv_std)
    y = channel_affine(x_hat, state.gamma, state.beta)
    bn_update_running(state, mu, var, m_int)
    cache = BNForwardCache(x_hat=x_hat, mu=mu, var=var, total_count=m_int,
                           train=True, scope_key=scope_key)
    return y, cache


def bn_forward_local(x: Tensor, state: BNLayerState,
                     mode: str = "train") -> tuple[Tensor, BNForwardCache]:
    """Batch normalization over a single device's batch.

    Training mode computes biased per-channel statistics from `x` and
    updates the running estimates; eval mode normalizes with the running
    statistics and leaves the state untouched.
    """
    _check_layout(x, state)
    if mode == "train":
        return _train_forward(x, state, lambda v: v, None, one_pass=False)
    if mode != "eval":
        raise BatchNormError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    x_hat = channel_affine(x, inv_std, -state.running_mean * inv_std)
    y = channel_affine(x_hat, state.gamma, state.beta)
    cache = BNForwardCache(x_hat=x_hat, mu=state.running_mean.copy(),
                           var=state.running_var.copy(),
                           total_count=x.size // state.channels, train=False)
    return y, cache


def sync_bn_forward(handle: DeviceHandle, x_local: Tensor, state: BNLayerState,
                    one_pass: bool = False) -> tuple[Tensor, BNForwardCache]:
    """Training-mode batch normalization synchronized across a BN sub-group.

    Every rank of the sub-group must call this with tensors of identical
    channel/spatial extents (per-device batch sizes may differ; counts are
    reduced along with the sums so the mean stays exact). All ranks end up
    with bitwise-identical statistics, and the output matches
    `bn_forward_local` on the concatenation of all shards.
    """
    _check_layout(x_local, state)
    scope_key = f"bn{handle.bn_group_index}"
    return _train_forward(
        x_local, state,
        lambda v: allreduce_sum(handle, SCOPE_BN_GROUP, v),
        scope_key, one_pass=one_pass,
    )


def _backward_core(dy: Tensor, cache: BNForwardCache, state: BNLayerState, reduce_vec):
    if not cache.train:
        raise BatchNormError("backward requires a training-mode forward cache")
    if dy.shape != cache.x_hat.shape:
        raise BatchNormError(
            f"cotangent shape {dy.shape} does not match cached shape {cache.x_hat.shape}"
        )
    c = state.channels
    if cache.mu.shape != (c,):
        raise BatchNormError("cache does not match this layer state")
    x_hat = cache.x_hat.array
    rows_dy = _channels_last_rows(dy.array)
    rows_dyx = _channels_last_rows(dy.array * x_hat)
    packed = np.concatenate([sequential_sum_rows(rows_dy), sequential_sum_rows(rows_dyx)])
    total = reduce_vec(packed)
    dbeta, dgamma = total[:c], total[c:]
    m = float(cache.total_count)
    inv_std = state.gamma / np.sqrt(cache.var + state.eps)
    bshape = (1, c) + (1,) * (len(dy.shape) - 2)
    dx = inv_std.reshape(bshape) * (
        dy.array - dbeta.reshape(bshape) / m - x_hat * dgamma.reshape(bshape) / m
    )
    return Tensor(dx, _context="bn_backward"), dgamma, dbeta


def bn_backward_local(dy: Tensor, cache: BNForwardCache,
                      state: BNLayerState) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Backward pass matching a local training-mode forward."""
    if cache.scope_key is not None:
        raise BatchNormError("cache came from a synchronized forward; use sync_bn_backward")
    return _backward_core(dy, cache, state, lambda v: v)


def sync_bn_backward(handle: DeviceHandle, dy_local: Tensor, cache: BNForwardCache,
                     state: BNLayerState) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Backward pass matching `sync_bn_forward` on the same sub-group.

    The two per-channel reductions (sum of dy and sum of dy * x_hat) are
    aggregated over the sub-group, so dgamma/dbeta are identical on every
    rank and the whole pass is the exact adjoint of the forward.
    """
    scope_key = f"bn{handle.bn_group_index}"
    if cache.scope_key != scope_key:
        raise BatchNormError(
            f"cache was produced under scope {cache.scope_key!r} but this device "
            f"belongs to {scope_key!r}"
        )
    return _backward_core(dy_local, cache, state,
                          lambda v: allreduce_sum(handle, SCOPE_BN_GROUP, v))


def bn_update_running(state: BNLayerState, mu: np.ndarray, var: np.ndarray,
                      count: int) -> BNLayerState:
    """Blend batch statistics into the running estimates, in place.

    The running variance uses the unbiased correction count/(count-1); the
    batch variance itself stays biased for normalization.
    """
    if count <= 1:
        raise BatchNormError(f"running-variance update needs count > 1, got {count}")
    rho = state.running_momentum
    unbiased = var * (count / (count - 1.0))
    state.running_mean = (1.0 - rho) * state.running_mean + rho * mu
    state.running_var = (1.0 - rho) * state.running_var + rho * unbiased
    return state
