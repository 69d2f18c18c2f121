"""Physically ragged KV cache of per-token spectral prefixes.

Each cached token stores only its retained leading spectral components — a
length and that many floats, no padding — so the float count IS the memory
claim. Reconstruction multiplies each prefix by the matching leading rows of
the basis inverse; rotary position embedding is applied to keys afterwards.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from dynakv.errors import DimensionError, RankError


def rope_rotate(x, positions, base=10000.0, inverse=False):
    """Rotate interleaved pairs of the last axis by position-scaled angles.

    positions must broadcast against x.shape[:-1]. inverse=True applies the
    transpose rotation (used as the gradient of the forward form).
    """
    x = np.asarray(x, dtype=np.float64)
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise DimensionError(f"rotary embedding needs an even head dim, got {head_dim}")
    half = head_dim // 2
    inv_freq = float(base) ** (-np.arange(half) / half)
    angles = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    cos = np.cos(angles)
    sin = np.sin(angles)
    if inverse:
        sin = -sin
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape[:-1], angles.shape[:-1]) + (head_dim,))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(k, positions, base=10000.0):
    """Rotary transform of key states shaped [T, n_heads, head_dim]."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 3:
        raise DimensionError(f"apply_rope expects [T, heads, head_dim], got {k.shape}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (k.shape[0],):
        raise DimensionError("one position per token required")
    return rope_rotate(k, positions[:, None], base=base)


@dataclass
class CompressedEntry:
    """One token's retained spectral prefix."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape[0] < 1:
            raise RankError(f"entry must hold >= 1 component, got shape {self.values.shape}")

    @property
    def retained_len(self):
        return self.values.shape[0]


class RaggedKVCache:
    """Per-layer sequences of (key, value) prefixes with exact accounting."""

    def __init__(self, n_layers, n_heads, head_dim, rope_base=10000.0):
        if head_dim % 2 != 0:
            raise DimensionError("head_dim must be even for rotary embedding")
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.rope_base = float(rope_base)
        self.d_kv = n_heads * head_dim
        self._keys = [[] for _ in range(n_layers)]
        self._values = [[] for _ in range(n_layers)]
        self._positions = [[] for _ in range(n_layers)]
        self._next_position = [0] * n_layers
        self.clamped_zero_rank = 0

    def _check_layer(self, layer):
        if not 0 <= layer < self.n_layers:
            raise DimensionError(f"layer {layer} outside [0, {self.n_layers})")

    def append(self, layer, key_entry, value_entry, position=None):
        self._check_layer(layer)
        for entry in (key_entry, value_entry):
            if entry.retained_len > self.d_kv:
                raise RankError(
                    f"retained length {entry.retained_len} exceeds d_kv {self.d_kv}")
        if position is None:
            position = self._next_position[layer]
        self._keys[layer].append(key_entry)
        self._values[layer].append(value_entry)
        self._positions[layer].append(int(position))
        self._next_position[layer] = max(self._next_position[layer], int(position) + 1)

    def append_truncated(self, layer, key_spec, key_len, value_spec, value_len,
                         position=None):
        """Append prefixes of full spectral vectors, clamping rank 0 up to 1.

        A zero retained length would erase the token entirely; the first
        component is kept instead and the clamp counted for reporting.
        Returns the stored (key_entry, value_entry).
        """
        entries = []
        for spec, r in ((key_spec, key_len), (value_spec, value_len)):
            spec = np.asarray(spec, dtype=np.float64)
            if r < 1:
                self.clamped_zero_rank += 1
                r = 1
            entries.append(CompressedEntry(spec[:r].copy()))
        self.append(layer, entries[0], entries[1], position=position)
        return entries[0], entries[1]

    def append_batch(self, layer, key_entries, value_entries):
        if len(key_entries) != len(value_entries):
            raise DimensionError("key/value entry counts differ")
        for k, v in zip(key_entries, value_entries):
            self.append(layer, k, v)

    def n_tokens(self, layer):
        self._check_layer(layer)
        return len(self._keys[layer])

    def positions(self, layer):
        self._check_layer(layer)
        return np.asarray(self._positions[layer], dtype=np.int64)

    def entries(self, layer, stream):
        self._check_layer(layer)
        return self._keys[layer] if stream == "K" else self._values[layer]

    def retained_lengths(self, layer, stream):
        return np.asarray([e.retained_len for e in self.entries(layer, stream)],
                          dtype=np.int64)

    # -- reconstruction ----------------------------------------------------

    def reconstruct_all(self, layer, basis_k, basis_v):
        """Rebuild full-width K and V matrices [T, d_kv] for one layer.

        Tokens are grouped by retained length so each group becomes one
        matmul against the leading rows of the inverse; the result is
        identical to reconstructing token by token.
        """
        self._check_layer(layer)
        for basis in (basis_k, basis_v):
            if basis.dim != self.d_kv:
                raise DimensionError(f"basis dim {basis.dim} != cache d_kv {self.d_kv}")
        k = self._reconstruct_stream(self._keys[layer], basis_k)
        v = self._reconstruct_stream(self._values[layer], basis_v)
        return k, v

    def _reconstruct_stream(self, entries, basis):
        t = len(entries)
        out = np.zeros((t, self.d_kv))
        if t == 0:
            return out
        lengths = np.asarray([e.retained_len for e in entries])
        for r in np.unique(lengths):
            idx = np.nonzero(lengths == r)[0]
            stacked = np.stack([entries[i].values for i in idx])
            out[idx] = stacked @ basis.inverse[:r, :]
        return out

    def reconstructed_keys_with_rope(self, layer, basis_k):
        k = self._reconstruct_stream(self._keys[layer], basis_k)
        k = k.reshape(-1, self.n_heads, self.head_dim)
        return apply_rope(k, self.positions(layer), base=self.rope_base)

    # -- accounting ----------------------------------------------------------

    def total_floats(self):
        return int(sum(e.retained_len for layer in self._keys for e in layer)
                   + sum(e.retained_len for layer in self._values for e in layer))

    def memory_report(self):
        """Exact stored-float counts and retain rates, no tolerances."""
        per_layer = {}
        stream_floats = {"K": 0, "V": 0}
        stream_capacity = {"K": 0, "V": 0}
        total = 0
        capacity = 0
        for layer in range(self.n_layers):
            k_floats = int(sum(e.retained_len for e in self._keys[layer]))
            v_floats = int(sum(e.retained_len for e in self._values[layer]))
            tokens = len(self._keys[layer])
            layer_capacity = 2 * tokens * self.d_kv
            per_layer[layer] = {
                "tokens": tokens,
                "floats": k_floats + v_floats,
                "rate": (k_floats + v_floats) / layer_capacity if layer_capacity else 0.0,
            }
            stream_floats["K"] += k_floats
            stream_floats["V"] += v_floats
            stream_capacity["K"] += tokens * self.d_kv
            stream_capacity["V"] += tokens * self.d_kv
            total += k_floats + v_floats
            capacity += layer_capacity
        return {
            "total_floats": total,
            "capacity_floats": capacity,
            "rate_overall": total / capacity if capacity else 0.0,
            "rate_per_layer": {layer: info["rate"] for layer, info in per_layer.items()},
            "rate_per_stream": {
                s: stream_floats[s] / stream_capacity[s] if stream_capacity[s] else 0.0
                for s in ("K", "V")
            },
            "tokens_per_layer": {layer: info["tokens"] for layer, info in per_layer.items()},
            "clamped_zero_rank": self.clamped_zero_rank,
        }

    # -- eviction support ----------------------------------------------------

    def copy(self):
        dup = RaggedKVCache(self.n_layers, self.n_heads, self.head_dim, self.rope_base)
        dup._keys = [list(layer) for layer in self._keys]
        dup._values = [list(layer) for layer in self._values]
        dup._positions = [list(layer) for layer in self._positions]
        dup._next_position = list(self._next_position)
        dup.clamped_zero_rank = self.clamped_zero_rank
        return dup

    def keep_indices(self, layer, indices):
        """Retain only the given token indices (cache order) in one layer."""
        self._check_layer(layer)
        indices = sorted(int(i) for i in indices)
        n = len(self._keys[layer])
        if indices and (indices[0] < 0 or indices[-1] >= n):
            raise DimensionError(f"keep index outside [0, {n})")
        self._keys[layer] = [self._keys[layer][i] for i in indices]
        self._values[layer] = [self._values[layer][i] for i in indices]
        self._positions[layer] = [self._positions[layer][i] for i in indices]

    # -- debugging -------------------------------------------------------------

    def dump_jsonl(self, path):
        """One JSON line per stored entry: layer, token, stream, r, digest."""
        with open(path, "w", encoding="utf-8") as fh:
            for layer in range(self.n_layers):
                for stream, store in (("K", self._keys), ("V", self._values)):
                    for token, entry in zip(self._positions[layer], store[layer]):
                        digest = hashlib.sha256(
                            np.ascontiguousarray(entry.values).tobytes()).hexdigest()[:16]
                        fh.write(json.dumps({
                            "layer": layer,
                            "token": token,
                            "stream": stream,
                            "r": entry.retained_len,
                            "values_digest": digest,
                        }) + "\n")
