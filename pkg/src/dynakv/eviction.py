"""Sequence-dimension pruning composed with the spectral cache.

Importance comes from the attention mass the trailing observation-window
queries place on each cached position, summed over heads and smoothed with a
1-D max pool. Because the spectral decomposition is joint across heads, the
evicted positions must be identical for every head and both streams within a
layer: the retained set is the observation window plus the top-scored
remainder of the budget.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from dynakv.errors import ConfigError, ContractViolationError, DimensionError

logger = logging.getLogger(__name__)


@dataclass
class EvictionConfig:
    keep_budget: int
    observation_window: int = 32
    pooling_width: int = 7

    def __post_init__(self):
        if self.observation_window < 1 or self.pooling_width < 1:
            raise ConfigError("window widths must be >= 1")
        if self.keep_budget < self.observation_window:
            raise ConfigError(
                f"keep_budget {self.keep_budget} < observation_window "
                f"{self.observation_window}")


def max_pool_1d(scores, width):
    """Centered max pooling with clamped edges; width 1 is the identity."""
    if width <= 1:
        return np.asarray(scores, dtype=np.float64).copy()
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    left = (width - 1) // 2
    out = np.empty(n)
    for i in range(n):
        lo = max(0, i - left)
        hi = min(n, i - left + width)
        out[i] = scores[lo:hi].max()
    return out


def score_tokens(attn_weights, pooling_width=7):
    """Per-position importance from [heads, window_queries, T] attention."""
    attn = np.asarray(attn_weights, dtype=np.float64)
    if attn.ndim != 3:
        raise DimensionError(f"expected [heads, queries, T], got {attn.shape}")
    row_sums = attn.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ContractViolationError("attention rows must each sum to 1")
    return max_pool_1d(attn.sum(axis=(0, 1)), pooling_width)


def window_scores(attn_rows, total_tokens, pooling_width=7):
    """Score from ragged per-step rows (each [heads, prefix_len]), zero-padded."""
    if not attn_rows:
        raise DimensionError("no attention rows collected")
    heads = attn_rows[0].shape[0]
    padded = np.zeros((heads, len(attn_rows), total_tokens))
    for i, row in enumerate(attn_rows):
        padded[:, i, :row.shape[1]] = row
    return score_tokens(padded, pooling_width)


def select_retained(importance, n_tokens, cfg):
    """Indices kept: the trailing observation window plus top-scored rest."""
    importance = np.asarray(importance, dtype=np.float64)
    if importance.shape != (n_tokens,):
        raise DimensionError(
            f"importance length {importance.shape} != cached tokens {n_tokens}")
    window_start = n_tokens - cfg.observation_window
    window = list(range(max(0, window_start), n_tokens))
    remaining = cfg.keep_budget - len(window)
    candidates = np.arange(max(0, window_start))
    if remaining > 0 and candidates.size:
        order = np.argsort(-importance[candidates], kind="stable")
        picked = candidates[order[:remaining]]
    else:
        picked = np.empty(0, dtype=np.int64)
    return np.asarray(sorted(set(window) | set(int(i) for i in picked)), dtype=np.int64)


def evict(cache, importance, cfg):
    """Return a pruned copy keeping at most cfg.keep_budget tokens per layer.

    importance is either one vector over cache order (applied to every layer)
    or a [n_layers, T] matrix allowing layer-specific scores. The retained
    positions are identical across heads and both streams within each layer
    by construction (whole tokens are dropped).
    """
    n = cache.n_tokens(0)
    for layer in range(cache.n_layers):
        if cache.n_tokens(layer) != n:
            raise DimensionError("layers hold different token counts")
    importance = np.asarray(importance, dtype=np.float64)
    if importance.ndim == 1:
        importance = np.tile(importance, (cache.n_layers, 1))
    if importance.shape != (cache.n_layers, n):
        raise DimensionError(
            f"importance shape {importance.shape} != ({cache.n_layers}, {n})")
    pruned = cache.copy()
    if cfg.keep_budget >= n:
        logger.warning("eviction budget %d >= %d cached tokens; no-op",
                       cfg.keep_budget, n)
        return pruned
    for layer in range(cache.n_layers):
        keep = select_retained(importance[layer], n, cfg)
        pruned.keep_indices(layer, keep)
    return pruned


def combined_budget(keep_ratio, mean_retain_rate):
    """Effective cache fraction when token pruning stacks with rank pruning."""
    for name, value in (("keep_ratio", keep_ratio), ("mean_retain_rate", mean_retain_rate)):
        if not 0.0 < value <= 1.0:
            raise ConfigError(f"{name} must lie in (0, 1], got {value}")
    return keep_ratio * mean_retain_rate


def eviction_report(cache_before, cache_after, cfg):
    """Budget arithmetic: measured survivor rate and the product estimate."""
    before = cache_before.memory_report()
    after = cache_after.memory_report()
    total_tokens = cache_before.n_tokens(0)
    retained_tokens = cache_after.n_tokens(0)
    keep_ratio = retained_tokens / total_tokens if total_tokens else 0.0
    survivor_rate = after["rate_overall"]
    corpus_rate = before["rate_overall"]
    return {
        "keep_budget": cfg.keep_budget,
        "observation_window": cfg.observation_window,
        "total_tokens": total_tokens,
        "retained_tokens": retained_tokens,
        "keep_ratio": keep_ratio,
        "survivor_retain_rate": survivor_rate,
        "effective_rate_measured": keep_ratio * survivor_rate,
        "effective_rate_product": combined_budget(keep_ratio, corpus_rate)
        if 0.0 < keep_ratio <= 1.0 and 0.0 < corpus_rate <= 1.0 else None,
    }
