"""Learnable per-token truncation gate.

A linear head over the spectral state produces a distribution over cutoff
indices; suffix-summing that distribution yields a monotone soft mask that is
(approximately) 1 up to the cutoff and 0 after it. Inference thresholds the
soft mask into a prefix length; training keeps the continuous values so the
cutoff stays differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dynakv import autodiff as ad
from dynakv.autodiff import Tensor
from dynakv.errors import ContractViolationError, DimensionError, EmptyStatsError

MONOTONE_TOL = 1e-9

DEFAULT_INIT_PEAK = 16.0


@dataclass
class GateParams:
    """Trainable cutoff head for one layer and one stream (K or V)."""

    weight: Tensor  # d x d
    bias: Tensor    # d
    layer_id: int
    stream: str

    @property
    def dim(self):
        return self.bias.shape[0]

    @classmethod
    def fresh(cls, dim, layer_id=0, stream="K", init_peak=DEFAULT_INIT_PEAK, trainable=True):
        """Near-keep-everything init: all cutoff mass on the last index.

        The bias places a single saturated logit at the top dimension so the
        initial mask is 1 to within ~d*exp(-init_peak); the weight starts at
        zero so compression pressure, not the input, moves the cutoff first.
        """
        bias = np.zeros(dim)
        bias[-1] = float(init_peak)
        return cls(weight=Tensor(np.zeros((dim, dim)), requires_grad=trainable),
                   bias=Tensor(bias, requires_grad=trainable),
                   layer_id=layer_id, stream=stream)


def cutoff_distribution(params, x_spec):
    """Rows of probabilities over cutoff indices for each token."""
    if x_spec.shape[-1] != params.dim:
        raise DimensionError(
            f"spectral width {x_spec.shape[-1]} != gate dim {params.dim}")
    logits = ad.add(ad.matmul(x_spec, params.weight), params.bias)
    return ad.softmax(logits)


def soft_mask(p):
    """Monotone soft mask from a cutoff distribution (differentiable).

    Entry 0 is pinned to exactly 1 (the full probability mass) and the suffix
    sums are clamped to <= 1, so the mask always lies in [0, 1] regardless of
    float rounding in the softmax.
    """
    pdata = p.data
    if np.any(pdata < 0.0) or np.any(pdata.sum(axis=-1) > 1.0 + 1e-9):
        raise ContractViolationError("soft_mask input must be sub-probability rows")
    raw = ad.reverse_cumsum_np(pdata)
    m = np.minimum(raw, 1.0)
    m[..., 0] = 1.0
    open_gate = (raw < 1.0).astype(np.float64)
    open_gate[..., 0] = 0.0  # pinned entry passes no gradient
    out = ad._make(m, (p,), None)

    def backward(g):
        if p.requires_grad:
            ad._accumulate(p, np.cumsum(g * open_gate, axis=-1))

    if out._parents:
        out._backward = backward
    return out


def gate_forward_np(params, x_spec):
    """No-grad forward pass: (cutoff distribution, soft mask) for [T, d] rows."""
    x_spec = np.asarray(x_spec, dtype=np.float64)
    if x_spec.shape[-1] != params.dim:
        raise DimensionError(
            f"spectral width {x_spec.shape[-1]} != gate dim {params.dim}")
    p = ad.softmax_np(x_spec @ params.weight.data + params.bias.data)
    m = np.minimum(ad.reverse_cumsum_np(p), 1.0)
    m[..., 0] = 1.0
    return p, m


def harden(m, threshold):
    """Count of mask entries above the threshold — the retained prefix length.

    Requires a non-increasing mask in [0, 1]; monotonicity makes the count
    equal to a contiguous prefix. May return 0 (the cache layer clamps).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 1:
        raise ContractViolationError(f"harden expects one mask vector, got shape {m.shape}")
    if np.any(m[1:] > m[:-1] + MONOTONE_TOL):
        raise ContractViolationError("harden input mask is not non-increasing")
    if m.min(initial=1.0) < -MONOTONE_TOL or m.max(initial=0.0) > 1.0 + MONOTONE_TOL:
        raise ContractViolationError("harden input mask must lie in [0, 1]")
    return int((m > threshold).sum())


def retain_rate_soft(m):
    """Mean of the continuous mask entries (the loss-side retain rate)."""
    return float(np.mean(m))


def retain_rate_hard(r, dim):
    return float(r) / float(dim)


@dataclass
class RetainStats:
    """Retain-rate aggregates over tokens x layers x streams x batches."""

    sum_of_rates: float = 0.0
    token_count: int = 0
    per_layer: dict = field(default_factory=dict)
    per_stream: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def add(self, layer_id, stream, rates, trace_entries=None):
        rates = np.atleast_1d(np.asarray(rates, dtype=np.float64))
        self.sum_of_rates += float(rates.sum())
        self.token_count += rates.size
        layer_slot = self.per_layer.setdefault(layer_id, [0.0, 0])
        layer_slot[0] += float(rates.sum())
        layer_slot[1] += rates.size
        stream_slot = self.per_stream.setdefault(stream, [0.0, 0])
        stream_slot[0] += float(rates.sum())
        stream_slot[1] += rates.size
        if trace_entries is not None:
            self.trace.extend(trace_entries)

    def merge(self, other):
        self.sum_of_rates += other.sum_of_rates
        self.token_count += other.token_count
        for key, (s, n) in other.per_layer.items():
            slot = self.per_layer.setdefault(key, [0.0, 0])
            slot[0] += s
            slot[1] += n
        for key, (s, n) in other.per_stream.items():
            slot = self.per_stream.setdefault(key, [0.0, 0])
            slot[0] += s
            slot[1] += n
        self.trace.extend(other.trace)
        return self

    @property
    def mean_rate(self):
        if self.token_count == 0:
            raise EmptyStatsError("no retain-rate samples aggregated")
        return self.sum_of_rates / self.token_count

    def layer_means(self):
        return {k: s / n for k, (s, n) in sorted(self.per_layer.items())}

    def stream_means(self):
        return {k: s / n for k, (s, n) in sorted(self.per_stream.items())}


def aggregate_stats(entries):
    """Build RetainStats from (layer_id, stream, rates) triples."""
    stats = RetainStats()
    for layer_id, stream, rates in entries:
        stats.add(layer_id, stream, rates)
    if stats.token_count == 0:
        raise EmptyStatsError("aggregate_stats received no samples")
    return stats
