import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factories import small_schema
from mtgr.data import FeatureSchema
from mtgr.embedding import (
    CapacityError,
    DynamicHashTable,
    EmbeddingKey,
    KeyIndex,
    ShardedEmbeddingStore,
    ShardRouter,
    ValueSlab,
    init_vectors,
    merge_tables,
    naive_lookup,
    splitmix64,
    two_stage_dedup_lookup,
)


def keys(n, table_id=0, start=1):
    return np.full(n, table_id), np.arange(start, start + n, dtype=np.uint64)


class TestKeyIndex:
    def test_insert_find_delete(self):
        idx = KeyIndex(8)
        t, f = keys(5)
        idx.insert(t, f, np.arange(5))
        np.testing.assert_array_equal(idx.find(t, f), np.arange(5))
        idx.delete(t[:2], f[:2])
        np.testing.assert_array_equal(idx.find(t, f), [-1, -1, 2, 3, 4])
        assert idx.live == 3

    def test_rehash_keeps_mapping(self):
        idx = KeyIndex(64)
        t, f = keys(40)
        idx.insert(t, f, np.arange(40) * 3)
        big = idx.rehashed(256)
        np.testing.assert_array_equal(big.find(t, f), np.arange(40) * 3)

    def test_table_id_distinguishes(self):
        idx = KeyIndex(8)
        idx.insert(np.array([0, 1]), np.array([7, 7], dtype=np.uint64), np.array([0, 1]))
        np.testing.assert_array_equal(idx.find(np.array([1, 0]), np.array([7, 7], dtype=np.uint64)), [1, 0])

    @settings(max_examples=30)
    @given(st.lists(st.integers(0, 2**63), min_size=1, max_size=60, unique=True))
    def test_no_shared_slots(self, ids):
        idx = KeyIndex(128)
        f = np.array(ids, dtype=np.uint64)
        idx.insert(np.zeros(f.size, dtype=np.int64), f, np.arange(f.size))
        found = idx.find(np.zeros(f.size, dtype=np.int64), f)
        assert sorted(found.tolist()) == list(range(f.size))


class TestValueSlab:
    def test_chunks_never_move(self):
        slab = ValueSlab(4, chunk_size=3)
        a = slab.alloc(3)
        chunk0 = slab.chunks[0]["value"]
        slab.scatter("value", a, np.ones((3, 4)))
        slab.alloc(10)
        assert slab.chunks[0]["value"] is chunk0
        np.testing.assert_array_equal(slab.gather("value", a), 1.0)

    def test_free_list_reused(self):
        slab = ValueSlab(2, chunk_size=4)
        a = slab.alloc(4)
        slab.release(a[1:3])
        assert sorted(slab.alloc(2).tolist()) == [1, 2]


class TestLookupOrInit:
    def test_idempotent(self):
        table = DynamicHashTable(8, seed=3)
        k = EmbeddingKey(0, 42)
        assert table.lookup_or_init(k).tobytes() == table.lookup_or_init(k).tobytes()

    def test_init_bound(self):
        table = DynamicHashTable(16)
        _, vecs = table.lookup_or_init_batch(*keys(500))
        assert np.all(np.abs(vecs) <= 1 / np.sqrt(16))

    def test_init_independent_of_order_and_table(self):
        a = DynamicHashTable(4, seed=5)
        b = DynamicHashTable(4, seed=5, initial_capacity=512)
        t, f = keys(30)
        va = a.lookup_or_init_batch(t, f)[1]
        vb = b.lookup_or_init_batch(t[::-1], f[::-1])[1][::-1]
        np.testing.assert_array_equal(va, vb)
        np.testing.assert_array_equal(va, init_vectors(t, f, 4, 5))

    def test_grow_past_initial_capacity(self):
        table = DynamicHashTable(4, initial_capacity=16)
        t, f = keys(32)
        _, first = table.lookup_or_init_batch(t, f)
        assert table.capacity > 16 and len(table) == 32
        np.testing.assert_array_equal(table.lookup_or_init_batch(t, f)[1], first)

    def test_capacity_error_without_eviction(self):
        table = DynamicHashTable(4, max_slots=4, eviction=False)
        table.lookup_or_init_batch(*keys(4))
        with pytest.raises(CapacityError):
            table.lookup_or_init(EmbeddingKey(0, 99))

    def test_metadata_updated(self):
        table = DynamicHashTable(2)
        k = EmbeddingKey(1, 5)
        table.lookup_or_init(k)
        table.lookup_or_init(k)
        count, last = table.metadata(k)
        assert count == 2 and last == table.clock

    def test_duplicates_in_one_batch(self):
        table = DynamicHashTable(2)
        slots, vecs = table.lookup_or_init_batch([0, 0, 0], [9, 9, 9])
        assert len(set(slots.tolist())) == 1 and len(table) == 1
        assert table.metadata(EmbeddingKey(0, 9))[0] == 3

    def test_negative_ids_rejected(self):
        with pytest.raises(ValueError):
            DynamicHashTable(2).lookup_or_init_batch([0], np.array([-1]))


class TestExpand:
    def test_values_bitwise_stable(self):
        table = DynamicHashTable(8, initial_capacity=256)
        t, f = keys(100)
        slots, vecs = table.lookup_or_init_batch(t, f)
        table.write(slots, vecs * 3.5)  # as if an optimizer wrote them
        before = table.read(slots).tobytes()
        for _ in range(4):
            table.expand()
            np.testing.assert_array_equal(table.find(t, f), slots)
            assert table.read(slots).tobytes() == before
        assert table.capacity == 256 * 16

    def test_empty(self):
        table = DynamicHashTable(4)
        table.expand()
        assert len(table) == 0 and table.capacity == 32


class TestEvict:
    def test_lowest_count_first(self):
        table = DynamicHashTable(2)
        a, b = EmbeddingKey(0, 1), EmbeddingKey(0, 2)
        for _ in range(5):
            table.lookup_or_init(a)
        table.lookup_or_init(b)
        assert table.evict(1) == [b]

    def test_older_first_on_ties(self):
        table = DynamicHashTable(2)
        a, b = EmbeddingKey(0, 1), EmbeddingKey(0, 2)
        table.lookup_or_init(a)
        table.lookup_or_init(b)
        assert table.evict(1) == [a]

    def test_zero(self):
        table = DynamicHashTable(2)
        table.lookup_or_init(EmbeddingKey(0, 1))
        assert table.evict(0) == []

    def test_more_than_live_evicts_all(self):
        table = DynamicHashTable(2)
        table.lookup_or_init_batch(*keys(3))
        assert len(table.evict(10)) == 3 and len(table) == 0

    def test_pinned_within_step(self):
        table = DynamicHashTable(2, max_slots=3)
        old = EmbeddingKey(0, 100)
        table.lookup_or_init(old)
        table.begin_step()
        table.lookup_or_init_batch(*keys(2))
        table.lookup_or_init(EmbeddingKey(0, 50))  # forces one eviction
        assert table.find([0], [100])[0] == -1
        assert np.all(table.find(*keys(2)) >= 0)
        with pytest.raises(CapacityError):
            table.lookup_or_init(EmbeddingKey(0, 51))  # everything resident is pinned
        table.end_step()

    def test_bounded_table_evicts(self):
        table = DynamicHashTable(2, max_slots=10)
        for i in range(50):
            table.lookup_or_init(EmbeddingKey(0, i))
        assert len(table) == 10 and table.evicted_total == 40


class TestCheckpoint:
    def test_roundtrip(self):
        table = DynamicHashTable(3, max_slots=30, seed=7)
        t, f = keys(25)
        table.lookup_or_init_batch(t, f)
        table.evict(2)
        buf = io.BytesIO()
        table.save(buf)
        buf.seek(0)
        back = DynamicHashTable.load(buf, max_slots=30)
        assert sorted(back.keys()) == sorted(table.keys())
        for k in table.keys():
            assert back.metadata(k) == table.metadata(k)
        s1, s2 = table.find(t, f), back.find(t, f)
        np.testing.assert_array_equal(s1, s2)
        np.testing.assert_array_equal(back.read(s2[s2 >= 0]), table.read(s1[s1 >= 0]))
        buf2 = io.BytesIO()
        back.save(buf2)
        assert buf2.getvalue() == buf.getvalue()

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            DynamicHashTable.load(io.BytesIO(b"\x00" * 80))


class TestRouter:
    def test_partition(self):
        r = ShardRouter(4, seed=1)
        f = np.arange(10_000, dtype=np.uint64)
        d = r.route(f)
        assert set(np.unique(d)) == {0, 1, 2, 3}
        np.testing.assert_array_equal(d, r.route(f))

    def test_splitmix_is_bijective_on_sample(self):
        x = np.arange(100_000, dtype=np.uint64)
        assert np.unique(splitmix64(x)).size == x.size


def _shards(n, dim=4, seed=0):
    return [DynamicHashTable(dim, seed=seed) for _ in range(n)]


class TestTwoStageDedup:
    def test_same_id_everywhere(self):
        reqs = [(np.zeros(5, dtype=np.int64), np.full(5, 7, dtype=np.uint64)) for _ in range(4)]
        out, stats = two_stage_dedup_lookup(reqs, ShardRouter(2), _shards(2))
        assert stats.naive == 20 and stats.after_stage1 == 4 and stats.after_stage2 == 1
        assert all(o.vectors.shape == (5, 4) for o in out)

    def test_all_unique(self):
        reqs = [keys(10, start=1 + 10 * w) for w in range(3)]
        _, stats = two_stage_dedup_lookup(reqs, ShardRouter(3), _shards(3))
        assert stats.naive == stats.after_stage1 == stats.after_stage2 == 30
        assert stats.reduction == 0.0

    def test_matches_naive(self):
        rng = np.random.default_rng(0)
        reqs = [(rng.integers(0, 3, 200), rng.integers(0, 60, 200).astype(np.uint64)) for _ in range(4)]
        out, _ = two_stage_dedup_lookup(reqs, ShardRouter(4), _shards(4, seed=2))
        ref = naive_lookup(reqs, DynamicHashTable(4, seed=2))
        for o, r in zip(out, ref):
            assert o.vectors.tobytes() == r.tobytes()

    def test_shard_count_mismatch(self):
        with pytest.raises(ValueError):
            two_stage_dedup_lookup([keys(2)], ShardRouter(2), _shards(3))

    @settings(max_examples=40)
    @given(st.lists(st.lists(st.integers(0, 30), max_size=25), min_size=1, max_size=5), st.integers(1, 4))
    def test_counts_monotone(self, worker_ids, n_shards):
        reqs = [(np.zeros(len(w), dtype=np.int64), np.array(w, dtype=np.uint64)) for w in worker_ids]
        out, stats = two_stage_dedup_lookup(reqs, ShardRouter(n_shards), _shards(n_shards))
        assert stats.after_stage2 <= stats.after_stage1 <= stats.naive
        assert (stats.after_stage1 == stats.naive) == all(len(set(w)) == len(w) for w in worker_ids)
        union = set().union(*map(set, worker_ids))
        assert stats.after_stage2 == len(union)
        assert (stats.after_stage2 == stats.after_stage1) == (sum(len(set(w)) for w in worker_ids) == len(union))
        for o, w in zip(out, worker_ids):
            assert o.vectors.shape == (len(w), 4)


class TestMergeTables:
    def test_partition_by_dim(self):
        schema = FeatureSchema(("a", "b", "c", "d", "e"), ("s1", "s2"), ("i",), (),
                               {"a": 64, "b": 64, "c": 64, "d": 64, "e": 64, "s1": 32, "s2": 32, "i": 64})
        plan = merge_tables(schema)
        assert sorted(p.dim for p in plan.physical.values()) == [32, 64]
        assert len(plan.physical) == 2

    def test_single(self):
        schema = FeatureSchema((), ("s",), ("i",), (), {"s": 4, "i": 8})
        plan = merge_tables(schema)
        assert [p.features for p in plan.physical.values()] == [["s"], ["i"]]

    def test_hyper_splits(self):
        schema = small_schema()
        plan = merge_tables(schema, {"age": {"init_scale": 0.01}})
        assert plan.logical["age"][0] != plan.logical["ctr"][0]

    def test_equivalence_with_unmerged(self):
        schema = small_schema()
        merged = ShardedEmbeddingStore(merge_tables(schema), 3, seed=4)
        rng = np.random.default_rng(1)
        for name in schema.all_features:
            ids = rng.integers(0, 50, 20)
            alone = DynamicHashTable(schema.dims[name], seed=4)
            tid = schema.table_id(name)
            ref = alone.lookup_or_init_batch(np.full(20, tid), ids.astype(np.uint64))[1]
            np.testing.assert_array_equal(merged.lookup_feature(name, ids), ref)


class TestStore:
    def test_peek_does_not_insert(self):
        store = ShardedEmbeddingStore(merge_tables(small_schema()), 2)
        phys, t, f = store.keys_for("item", np.array([3, 4]))
        v = store.peek(phys, t, f)
        assert sum(len(tb) for tb in store.tables[phys]) == 0
        np.testing.assert_array_equal(v, store.lookup(phys, [(t, f)])[0].vectors)

    def test_lazy_adam_touches_only_rows(self):
        store = ShardedEmbeddingStore(merge_tables(small_schema()), 2)
        phys, t, f = store.keys_for("item", np.array([1, 2, 3]))
        store.lookup(phys, [(t, f)])
        before = store.read(phys, t, f)
        g = np.zeros_like(before)
        g[0] = 1.0
        store.adam_update(phys, t[:1], f[:1], g[:1], 0.1, 0.9, 0.999, 1e-8, 1)
        after = store.read(phys, t, f)
        np.testing.assert_allclose(after[0], before[0] - 0.1, rtol=1e-6)
        np.testing.assert_array_equal(after[1:], before[1:])

    def test_update_of_missing_key(self):
        store = ShardedEmbeddingStore(merge_tables(small_schema()), 1)
        phys, t, f = store.keys_for("item", np.array([1]))
        with pytest.raises(KeyError):
            store.adam_update(phys, t, f, np.ones((1, 4)), 0.1, 0.9, 0.999, 1e-8, 1)

    def test_save_load(self, tmp_path):
        schema = small_schema()
        store = ShardedEmbeddingStore(merge_tables(schema), 2, seed=3)
        for name in schema.all_features:
            store.lookup_feature(name, np.arange(10))
        store.save(tmp_path)
        back = ShardedEmbeddingStore(merge_tables(schema), 2, seed=3)
        back.load_tables(tmp_path)
        assert back.snapshot() == store.snapshot()
