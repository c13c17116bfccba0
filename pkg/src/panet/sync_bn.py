"""Synchronized batch normalization over simulated devices.

A batch is split into shards, one per simulated device.  Moments are gathered
with a two-phase reduction: shard sums give the global mean, which every shard
then uses to contribute its sum of squared deviations.  The backward pass
reduces its two per-channel sums the same way.  All reductions walk the shards
in index order, so results do not depend on how work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Module, Parameter
from .tensor import ContractViolation, Tensor, getitem


@dataclass
class ShardedBatch:
    shards: list[Tensor]

    def __post_init__(self):
        if not self.shards:
            raise ContractViolation("ShardedBatch needs at least one shard")
        if any(s.shape[0] == 0 for s in self.shards):
            raise ContractViolation("ShardedBatch shards must be non-empty")

    @classmethod
    def split(cls, x: Tensor, sizes) -> "ShardedBatch":
        sizes = [int(s) for s in sizes]
        if sum(sizes) != x.shape[0]:
            raise ContractViolation(f"shard sizes {sizes} do not cover batch of {x.shape[0]}")
        bounds = np.cumsum([0] + sizes)
        return cls([getitem(x, slice(bounds[i], bounds[i + 1])) for i in range(len(sizes))])

    @classmethod
    def even(cls, x: Tensor, n: int) -> "ShardedBatch":
        """Split as evenly as possible into ``n`` shards (earlier shards take the remainder)."""
        base, extra = divmod(x.shape[0], n)
        return cls.split(x, [base + (i < extra) for i in range(n)])

    @property
    def sizes(self) -> list[int]:
        return [s.shape[0] for s in self.shards]


@dataclass
class GlobalMoments:
    mu_B: np.ndarray
    sigma2_B: np.ndarray
    count: int


def _axes(a: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, a.ndim))


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def allreduce_moments(shards) -> GlobalMoments:
    """Global per-channel mean and biased variance of all shards.

    ``shards`` is a ShardedBatch or a list of arrays of shape (b_i, C, ...).
    """
    arrays = [s.data if isinstance(s, Tensor) else np.asarray(s, dtype=float)
              for s in (shards.shards if isinstance(shards, ShardedBatch) else shards)]
    if not arrays:
        raise ContractViolation("allreduce_moments needs at least one shard")
    if any(a.shape[0] == 0 for a in arrays):
        raise ContractViolation("allreduce_moments: empty shard")
    channels = arrays[0].shape[1]

    # phase 1: shard sums -> global mean, broadcast
    count = 0
    total = np.zeros(channels)
    for a in arrays:
        total = total + a.sum(axis=_axes(a))
        count += a.size // channels
    mu = total / count

    # phase 2: squared deviations from the global mean -> variance, broadcast
    sq = np.zeros(channels)
    for a in arrays:
        sq = sq + ((a - _bcast(mu, a.ndim)) ** 2).sum(axis=_axes(a))
    return GlobalMoments(mu, sq / count, count)


class BNLayer(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Parameter(np.ones(channels), weight_decay=False)
        self.beta = Parameter(np.zeros(channels), weight_decay=False)
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._buffers = ("running_mean", "running_var")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x: Tensor, shard_sizes=None) -> Tensor:
        mode = "train" if self.training else "eval"
        sizes = [x.shape[0]] if shard_sizes is None else [s for s in shard_sizes if s > 0]
        return syncbn_forward(ShardedBatch.split(x, sizes), self, mode)


@dataclass
class BNCache:
    xhat: list[np.ndarray]
    inv_std: np.ndarray
    gamma: np.ndarray
    count: int


def syncbn_forward(batch: ShardedBatch, layer: BNLayer, mode: str = "train", update_stats: bool = True) -> Tensor:
    """Normalize every shard with whole-batch moments; output is in batch order."""
    if any(s.shape[1] != layer.channels for s in batch.shards):
        raise ContractViolation(f"syncbn: expected {layer.channels} channels")
    if mode not in ("train", "eval"):
        raise ContractViolation(f"syncbn: unknown mode {mode!r}")
    gamma, beta = layer.gamma, layer.beta
    ndim = batch.shards[0].ndim
    parents = (*batch.shards, gamma, beta)

    if mode == "eval":
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
        xs = [s.data for s in batch.shards]
        xhat = [(a - _bcast(layer.running_mean, ndim)) * _bcast(inv_std, ndim) for a in xs]
        out = np.concatenate([_bcast(gamma.data, ndim) * h + _bcast(beta.data, ndim) for h in xhat])

        def backward_eval(g):
            parts = np.split(g, np.cumsum(batch.sizes)[:-1])
            scale = _bcast(gamma.data * inv_std, ndim)
            gx = [p * scale for p in parts]
            ax = _axes(g)
            cat = np.concatenate(xhat)
            return (*gx, (g * cat).sum(axis=ax), g.sum(axis=ax))

        return Tensor.from_op(out, parents, backward_eval)

    moments = allreduce_moments(batch)
    inv_std = 1.0 / np.sqrt(moments.sigma2_B + layer.eps)
    xhat = [(s.data - _bcast(moments.mu_B, ndim)) * _bcast(inv_std, ndim) for s in batch.shards]
    out = np.concatenate([_bcast(gamma.data, ndim) * h + _bcast(beta.data, ndim) for h in xhat])
    if update_stats:
        m = layer.momentum
        layer.running_mean = (1 - m) * layer.running_mean + m * moments.mu_B
        layer.running_var = (1 - m) * layer.running_var + m * moments.sigma2_B
    cache = BNCache(xhat, inv_std, gamma.data.copy(), moments.count)

    def backward(g):
        parts = np.split(g, np.cumsum(batch.sizes)[:-1])
        gx, ggamma, gbeta = syncbn_backward(parts, cache)
        return (*gx, ggamma, gbeta)

    return Tensor.from_op(out, parents, backward)


def syncbn_backward(upstream: list[np.ndarray], cache: BNCache | None):
    """Exact batch-norm gradients given per-shard upstream gradients.

    Returns ``(per-shard input grads, grad_gamma, grad_beta)``.
    """
    if cache is None:
        raise ContractViolation("syncbn_backward called without a cached forward state")
    if len(upstream) != len(cache.xhat):
        raise ContractViolation("syncbn_backward: shard count differs from forward")
    ndim = cache.xhat[0].ndim
    channels = cache.gamma.shape[0]
    sum_g = np.zeros(channels)
    sum_gx = np.zeros(channels)
    for g, h in zip(upstream, cache.xhat):
        sum_g = sum_g + g.sum(axis=_axes(g))
        sum_gx = sum_gx + (g * h).sum(axis=_axes(g))
    m = cache.count
    coef = _bcast(cache.gamma * cache.inv_std / m, ndim)
    grads = [
        coef * (m * g - _bcast(sum_g, ndim) - h * _bcast(sum_gx, ndim))
        for g, h in zip(upstream, cache.xhat)
    ]
    return grads, sum_gx, sum_g
