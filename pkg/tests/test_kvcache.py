import json
import math

import numpy as np
import pytest

from dynakv import spectral
from dynakv.errors import DimensionError, RankError
from dynakv.kvcache import CompressedEntry, RaggedKVCache, apply_rope, rope_rotate
from dynakv.spectral import CovarianceAccumulator


def make_cache(n_layers=2, n_heads=2, head_dim=4):
    return RaggedKVCache(n_layers, n_heads, head_dim)


def random_entry(rng, r):
    return CompressedEntry(rng.normal(size=r))


class TestEntries:
    def test_zero_rank_forbidden(self):
        with pytest.raises(RankError):
            CompressedEntry(np.zeros(0))

    def test_stored_float_count_is_length(self):
        e = CompressedEntry(np.arange(5.0))
        assert e.retained_len == 5


class TestAccounting:
    def test_full_rank_rate_one(self):
        cache = make_cache()
        rng = np.random.default_rng(0)
        for _ in range(6):
            for layer in range(2):
                cache.append(layer, random_entry(rng, 8), random_entry(rng, 8))
        report = cache.memory_report()
        assert report["rate_overall"] == 1.0
        assert report["total_floats"] == 2 * 2 * 6 * 8

    def test_half_rank_rate(self):
        cache = make_cache()
        rng = np.random.default_rng(1)
        for _ in range(5):
            for layer in range(2):
                cache.append(layer, random_entry(rng, 4), random_entry(rng, 4))
        assert cache.memory_report()["rate_overall"] == 0.5

    def test_mixed_ranks_exact_mean(self):
        cache = make_cache(n_layers=1)
        rng = np.random.default_rng(2)
        lengths = [1, 3, 8, 5]
        for r in lengths:
            cache.append(0, random_entry(rng, r), random_entry(rng, r))
        report = cache.memory_report()
        assert report["total_floats"] == 2 * sum(lengths)
        assert report["rate_overall"] == sum(lengths) / (len(lengths) * 8)

    def test_rate_formula_denominator(self):
        cache = make_cache()
        rng = np.random.default_rng(3)
        t = 7
        for _ in range(t):
            for layer in range(2):
                cache.append(layer, random_entry(rng, 2), random_entry(rng, 6))
        report = cache.memory_report()
        assert report["rate_overall"] == report["total_floats"] / (2 * 2 * t * 8)
        assert report["rate_per_stream"]["K"] == 2 / 8
        assert report["rate_per_stream"]["V"] == 6 / 8

    def test_rank_above_dkv_rejected(self):
        cache = make_cache()
        with pytest.raises(RankError):
            cache.append(0, random_entry(np.random.default_rng(0), 9),
                         random_entry(np.random.default_rng(0), 3))

    def test_zero_rank_clamped_and_counted(self):
        cache = make_cache(n_layers=1)
        spec = np.arange(1.0, 9.0)
        k_entry, v_entry = cache.append_truncated(0, spec, 0, spec, 3)
        assert k_entry.retained_len == 1
        assert k_entry.values[0] == 1.0  # first spectral component kept, not zero
        assert v_entry.retained_len == 3
        assert cache.memory_report()["clamped_zero_rank"] == 1


class TestReconstruction:
    def _basis(self, rng, d):
        acc = CovarianceAccumulator(d).accumulate(rng.normal(size=(20 * d, d)))
        return spectral.compute_basis(acc)

    def test_full_rank_round_trip(self):
        rng = np.random.default_rng(4)
        cache = make_cache(n_layers=1)
        basis_k = self._basis(rng, 8)
        basis_v = self._basis(rng, 8)
        originals = rng.normal(size=(5, 8))
        for x in originals:
            spec_k = spectral.project(basis_k, x)
            spec_v = spectral.project(basis_v, x)
            cache.append(0, CompressedEntry(spec_k), CompressedEntry(spec_v))
        k, v = cache.reconstruct_all(0, basis_k, basis_v)
        scale = max(1.0, np.abs(originals).max())
        assert np.abs(k - originals).max() <= 1e-8 * scale
        assert np.abs(v - originals).max() <= 1e-8 * scale

    def test_single_token_rank_one(self):
        rng = np.random.default_rng(5)
        basis = self._basis(rng, 8)
        cache = make_cache(n_layers=1)
        cache.append(0, CompressedEntry(np.array([2.0])), CompressedEntry(np.array([3.0])))
        k, v = cache.reconstruct_all(0, basis, basis)
        assert np.abs(k[0] - 2.0 * basis.inverse[0]).max() <= 1e-12
        assert np.abs(v[0] - 3.0 * basis.inverse[0]).max() <= 1e-12

    def test_per_token_error_equals_trailing_energy(self):
        rng = np.random.default_rng(6)
        basis = self._basis(rng, 8)
        cache = make_cache(n_layers=1)
        originals = rng.normal(size=(6, 8))
        ranks = [1, 3, 8, 4, 2, 6]
        specs = [spectral.project(basis, x) for x in originals]
        for spec, r in zip(specs, ranks):
            cache.append(0, CompressedEntry(spec[:r]), CompressedEntry(spec[:r]))
        k, _ = cache.reconstruct_all(0, basis, basis)
        for i, (x, spec, r) in enumerate(zip(originals, specs, ranks)):
            err_sq = float(np.sum((x - k[i]) ** 2))
            trailing = float(np.sum(spec[r:] ** 2))
            assert abs(err_sq - trailing) <= 1e-8 * max(1.0, trailing)

    def test_grouped_matches_per_token_loop(self):
        rng = np.random.default_rng(7)
        basis = self._basis(rng, 8)
        cache = make_cache(n_layers=1)
        entries = [random_entry(rng, int(rng.integers(1, 9))) for _ in range(12)]
        for e in entries:
            cache.append(0, e, e)
        k, _ = cache.reconstruct_all(0, basis, basis)
        naive = np.stack([spectral.reconstruct(basis, e.values) for e in entries])
        # grouped gemm vs per-token gemv may differ in the last ulp only
        assert np.abs(k - naive).max() <= 1e-12

    def test_incremental_equals_batch_append(self):
        rng = np.random.default_rng(8)
        basis = self._basis(rng, 8)
        entries = [random_entry(rng, int(rng.integers(1, 9))) for _ in range(9)]
        one = make_cache(n_layers=1)
        for e in entries:
            one.append(0, e, e)
        two = make_cache(n_layers=1)
        two.append_batch(0, entries, entries)
        k1, v1 = one.reconstruct_all(0, basis, basis)
        k2, v2 = two.reconstruct_all(0, basis, basis)
        assert np.array_equal(k1, k2)
        assert np.array_equal(v1, v2)
        assert one.memory_report() == two.memory_report()

    def test_basis_dim_mismatch(self):
        cache = make_cache()
        with pytest.raises(DimensionError):
            cache.reconstruct_all(0, spectral.identity_basis(4), spectral.identity_basis(4))


class TestRope:
    def test_position_zero_is_identity(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 2, 8))
        out = apply_rope(x, np.zeros(1))
        assert np.abs(out - x).max() <= 1e-15

    def test_norm_preserved(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(5, 2, 8))
        out = apply_rope(x, np.arange(5.0) * 13.0)
        assert np.abs(np.linalg.norm(out, axis=-1) - np.linalg.norm(x, axis=-1)).max() <= 1e-10

    def test_relative_position_property_2d(self):
        # oracle: direct trig — <R(p1)q, R(p2)k> == <q, R(p2-p1)k> on one pair
        rng = np.random.default_rng(11)
        q = rng.normal(size=2)
        k = rng.normal(size=2)
        for p1, p2 in [(3.0, 7.0), (10.0, 2.0), (0.0, 5.0)]:
            rq = rope_rotate(q, p1)
            rk = rope_rotate(k, p2)
            lhs = float(rq @ rk)
            delta = p2 - p1
            c, s = math.cos(delta), math.sin(delta)
            rk_rel = np.array([k[0] * c - k[1] * s, k[0] * s + k[1] * c])
            rhs = float(q @ rk_rel)
            assert abs(lhs - rhs) <= 1e-10

    def test_inverse_rotation_round_trip(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(4, 8))
        pos = np.arange(4.0)
        back = rope_rotate(rope_rotate(x, pos[:, None]), pos[:, None], inverse=True)
        assert np.abs(back - x).max() <= 1e-12

    def test_odd_head_dim_rejected(self):
        with pytest.raises(DimensionError):
            apply_rope(np.zeros((1, 2, 5)), np.zeros(1))
        with pytest.raises(DimensionError):
            RaggedKVCache(1, 1, 5)


class TestEvictionSupport:
    def test_keep_indices_updates_accounting(self):
        rng = np.random.default_rng(13)
        cache = make_cache(n_layers=1)
        lengths = [2, 4, 6, 8]
        for r in lengths:
            cache.append(0, random_entry(rng, r), random_entry(rng, r))
        cache.keep_indices(0, [0, 2])
        report = cache.memory_report()
        assert report["total_floats"] == 2 * (2 + 6)
        assert list(cache.positions(0)) == [0, 2]

    def test_positions_survive_eviction_and_resume(self):
        rng = np.random.default_rng(14)
        cache = make_cache(n_layers=1)
        for _ in range(5):
            cache.append(0, random_entry(rng, 3), random_entry(rng, 3))
        cache.keep_indices(0, [0, 4])
        cache.append(0, random_entry(rng, 3), random_entry(rng, 3))
        assert list(cache.positions(0)) == [0, 4, 5]

    def test_copy_is_independent(self):
        rng = np.random.default_rng(15)
        cache = make_cache(n_layers=1)
        cache.append(0, random_entry(rng, 3), random_entry(rng, 3))
        dup = cache.copy()
        dup.append(0, random_entry(rng, 3), random_entry(rng, 3))
        assert cache.n_tokens(0) == 1
        assert dup.n_tokens(0) == 2


class TestDump:
    def test_jsonl_fields(self, tmp_path):
        rng = np.random.default_rng(16)
        cache = make_cache(n_layers=2)
        for layer in range(2):
            cache.append(layer, random_entry(rng, 2), random_entry(rng, 5))
        path = tmp_path / "dump.jsonl"
        cache.dump_jsonl(path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(rows) == 4  # 2 layers x (K + V)
        for row in rows:
            assert set(row) == {"layer", "token", "stream", "r", "values_digest"}
        ks = [r for r in rows if r["stream"] == "K"]
        assert all(r["r"] == 2 for r in ks)
