"""Dynamic hash embedding tables.

Keys and values live in separate structures. :class:`KeyIndex` is a compact
open-addressed map (linear probing, multiply-shift hashing) from
``(table_id, feature_id)`` to a slot number; :class:`ValueSlab` holds the
vectors, optimizer state and eviction metadata in fixed-size chunks that are
never reallocated. Growing the table only rebuilds the key index.

Sharding and the all-to-all exchange are simulated in-process; transfer
counters stand in for network traffic.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .data import FeatureSchema

logger = logging.getLogger(__name__)

EMPTY = -1
TOMBSTONE = -2

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_HASH_MULT = np.uint64(0xD6E8FEB86659FD93)  # odd multiplier for multiply-shift

CHECKPOINT_MAGIC = b"MTGREMB\x00"
CHECKPOINT_VERSION = 1


class CapacityError(RuntimeError):
    pass


class EmbeddingKey(NamedTuple):
    table_id: int
    feature_id: int


def splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x.astype(np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _as_keys(table_ids, feature_ids) -> Tuple[np.ndarray, np.ndarray]:
    t = np.asarray(table_ids, dtype=np.int64).reshape(-1)
    f = np.asarray(feature_ids).reshape(-1)
    if f.dtype != np.uint64:
        if f.dtype.kind == "i" and np.any(f < 0):
            raise ValueError("feature ids must be non-negative")
        f = f.astype(np.uint64)
    if t.shape != f.shape:
        t = np.broadcast_to(t, f.shape).copy()
    return t, f


def unique_keys(t: np.ndarray, f: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deduplicate (table_id, feature_id) pairs; returns unique t, f and the inverse map."""
    rec = np.empty(t.shape[0], dtype=[("t", np.int64), ("f", np.uint64)])
    rec["t"], rec["f"] = t, f
    uniq, inverse = np.unique(rec, return_inverse=True)
    return uniq["t"].copy(), uniq["f"].copy(), inverse.reshape(-1)


def init_vectors(t: np.ndarray, f: np.ndarray, dim: int, seed: int, scale: Optional[float] = None) -> np.ndarray:
    """Counter-based uniform init in [-scale, scale], scale defaulting to 1/sqrt(dim).

    Each vector is a pure function of (seed, table_id, feature_id), so the result
    does not depend on which shard or in which order a key is first seen.
    """
    scale = 1.0 / np.sqrt(dim) if scale is None else scale
    with np.errstate(over="ignore"):
        base = splitmix64(splitmix64(np.uint64(seed) ^ t.astype(np.uint64)) ^ f)
        ctr = base[:, None] + np.arange(dim, dtype=np.uint64)[None, :] * _GOLDEN
        u = (splitmix64(ctr) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return scale * (2.0 * u - 1.0)


class KeyIndex:
    """Open-addressed (table_id, feature_id) -> slot map with tombstone deletion."""

    def __init__(self, capacity: int = 16, seed: int = 0):
        if capacity < 1 or capacity & (capacity - 1):
            raise ValueError("capacity must be a power of two")
        self.capacity = capacity
        self.seed = seed
        self.key_t = np.zeros(capacity, dtype=np.int64)
        self.key_f = np.zeros(capacity, dtype=np.uint64)
        self.slot = np.full(capacity, EMPTY, dtype=np.int64)
        self.live = 0
        self.tombstones = 0

    @property
    def load_factor(self) -> float:
        return (self.live + self.tombstones) / self.capacity

    def _home(self, t: np.ndarray, f: np.ndarray) -> np.ndarray:
        bits = self.capacity.bit_length() - 1
        if bits == 0:
            return np.zeros(t.shape[0], dtype=np.int64)
        with np.errstate(over="ignore"):
            x = f ^ ((t.astype(np.uint64) + np.uint64(self.seed)) * _GOLDEN)
            h = (x * _HASH_MULT) >> np.uint64(64 - bits)
        return h.astype(np.int64)

    def find(self, t: np.ndarray, f: np.ndarray) -> np.ndarray:
        n = t.shape[0]
        out = np.full(n, EMPTY, dtype=np.int64)
        pos = self._home(t, f)
        active = np.arange(n)
        mask = self.capacity - 1
        for _ in range(self.capacity + 1):
            if active.size == 0:
                break
            p = pos[active]
            s = self.slot[p]
            hit = (s >= 0) & (self.key_t[p] == t[active]) & (self.key_f[p] == f[active])
            out[active[hit]] = s[hit]
            more = ~hit & (s != EMPTY)
            active = active[more]
            pos[active] = (pos[active] + 1) & mask
        return out

    def _locate(self, t: np.ndarray, f: np.ndarray) -> np.ndarray:
        """Index positions of present keys (-1 when absent)."""
        n = t.shape[0]
        out = np.full(n, -1, dtype=np.int64)
        pos = self._home(t, f)
        active = np.arange(n)
        mask = self.capacity - 1
        for _ in range(self.capacity + 1):
            if active.size == 0:
                break
            p = pos[active]
            s = self.slot[p]
            hit = (s >= 0) & (self.key_t[p] == t[active]) & (self.key_f[p] == f[active])
            out[active[hit]] = p[hit]
            more = ~hit & (s != EMPTY)
            active = active[more]
            pos[active] = (pos[active] + 1) & mask
        return out

    def insert(self, t: np.ndarray, f: np.ndarray, slots: np.ndarray) -> None:
        """Insert keys known to be absent and distinct."""
        if self.live + self.tombstones + t.shape[0] > self.capacity:
            raise CapacityError("key index full")
        pos = self._home(t, f)
        pending = np.arange(t.shape[0])
        mask = self.capacity - 1
        while pending.size:
            p = pos[pending]
            s = self.slot[p]
            free = s < 0
            cand, cpos = pending[free], p[free]
            uniq_pos, first = np.unique(cpos, return_index=True)
            win = cand[first]
            self.tombstones -= int(np.count_nonzero(self.slot[uniq_pos] == TOMBSTONE))
            self.key_t[uniq_pos] = t[win]
            self.key_f[uniq_pos] = f[win]
            self.slot[uniq_pos] = slots[win]
            self.live += win.size
            placed = np.zeros(t.shape[0], dtype=bool)
            placed[win] = True
            pending = pending[~placed[pending]]
            blocked = pending[self.slot[pos[pending]] >= 0]
            pos[blocked] = (pos[blocked] + 1) & mask

    def delete(self, t: np.ndarray, f: np.ndarray) -> None:
        p = self._locate(t, f)
        p = p[p >= 0]
        self.slot[p] = TOMBSTONE
        self.live -= p.size
        self.tombstones += p.size

    def items(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        occ = self.slot >= 0
        return self.key_t[occ].copy(), self.key_f[occ].copy(), self.slot[occ].copy()

    def rehashed(self, capacity: int) -> "KeyIndex":
        new = KeyIndex(capacity, self.seed)
        t, f, s = self.items()
        if t.size:
            new.insert(t, f, s)
        return new


class ValueSlab:
    """Chunked storage: vectors, Adam moments and per-slot (count, last_access)."""

    VECTOR_FIELDS = ("value", "m", "v")
    SCALAR_FIELDS = ("count", "last")

    def __init__(self, dim: int, chunk_size: int = 1024):
        self.dim = dim
        self.chunk_size = chunk_size
        self.chunks: List[Dict[str, np.ndarray]] = []
        self.allocated = 0
        self.free: List[int] = []

    def _new_chunk(self) -> Dict[str, np.ndarray]:
        c = {name: np.zeros((self.chunk_size, self.dim)) for name in self.VECTOR_FIELDS}
        c.update({name: np.zeros(self.chunk_size, dtype=np.int64) for name in self.SCALAR_FIELDS})
        return c

    def alloc(self, n: int) -> np.ndarray:
        take = min(n, len(self.free))
        reused = [self.free.pop() for _ in range(take)]
        fresh = np.arange(self.allocated, self.allocated + n - take, dtype=np.int64)
        self.allocated += n - take
        while len(self.chunks) * self.chunk_size < self.allocated:
            self.chunks.append(self._new_chunk())
        return np.concatenate([np.array(reused, dtype=np.int64), fresh])

    def release(self, slots: np.ndarray) -> None:
        for name in self.VECTOR_FIELDS + self.SCALAR_FIELDS:
            self.scatter(name, slots, 0)
        self.free.extend(int(s) for s in slots)

    def gather(self, name: str, slots: np.ndarray) -> np.ndarray:
        shape = (slots.shape[0], self.dim) if name in self.VECTOR_FIELDS else (slots.shape[0],)
        out = np.empty(shape, dtype=np.float64 if name in self.VECTOR_FIELDS else np.int64)
        ci, off = np.divmod(slots, self.chunk_size)
        for c in np.unique(ci):
            sel = ci == c
            out[sel] = self.chunks[c][name][off[sel]]
        return out

    def scatter(self, name: str, slots: np.ndarray, values) -> None:
        ci, off = np.divmod(slots, self.chunk_size)
        values = np.asarray(values)
        for c in np.unique(ci):
            sel = ci == c
            self.chunks[c][name][off[sel]] = values[sel] if values.ndim else values

    def add_at(self, name: str, slots: np.ndarray, amount: int = 1) -> None:
        ci, off = np.divmod(slots, self.chunk_size)
        for c in np.unique(ci):
            np.add.at(self.chunks[c][name], off[ci == c], amount)


class DynamicHashTable:
    """Hash embedding table that allocates rows on first access.

    ``max_slots=None`` means unbounded. When a bound is hit, the lowest-priority
    keys by ``(access_count, last_access)`` are evicted, or :class:`CapacityError`
    is raised when eviction is disabled. Keys touched since :meth:`begin_step`
    are pinned and never evicted.
    """

    def __init__(
        self,
        dim: int,
        initial_capacity: int = 16,
        *,
        max_slots: Optional[int] = None,
        eviction: bool = True,
        auto_expand: bool = True,
        max_load: float = 0.75,
        chunk_size: int = 1024,
        seed: int = 0,
        init_scale: Optional[float] = None,
        hash_seed: int = 0,
    ):
        self.dim = dim
        self.index = KeyIndex(initial_capacity, hash_seed)
        self.slab = ValueSlab(dim, chunk_size)
        self.max_slots = max_slots
        self.eviction = eviction
        self.auto_expand = auto_expand
        self.max_load = max_load
        self.seed = seed
        self.init_scale = init_scale
        self.clock = 0
        self.step_start: Optional[int] = None
        self.evicted_total = 0

    def __len__(self) -> int:
        return self.index.live

    @property
    def capacity(self) -> int:
        return self.index.capacity

    def begin_step(self) -> None:
        self.step_start = self.clock + 1

    def end_step(self) -> None:
        self.step_start = None

    def expand(self) -> None:
        """Double the key index; value chunks are left untouched."""
        self.index = self.index.rehashed(self.index.capacity * 2)

    def _reserve_index(self, n_new: int) -> None:
        idx = self.index
        if (idx.live + idx.tombstones + n_new) <= self.max_load * idx.capacity:
            return
        if not self.auto_expand:
            if idx.live + n_new > idx.capacity:
                raise CapacityError("key index full and expansion disabled")
            self.index = idx.rehashed(idx.capacity)
            return
        cap = idx.capacity
        while idx.live + n_new > self.max_load * cap:
            cap *= 2
        self.index = idx.rehashed(cap)

    def find(self, table_ids, feature_ids) -> np.ndarray:
        t, f = _as_keys(table_ids, feature_ids)
        return self.index.find(t, f)

    def lookup_or_init_batch(self, table_ids, feature_ids, *, touch: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """Slots and vectors for the given keys, inserting unseen keys."""
        t, f = _as_keys(table_ids, feature_ids)
        slots = self.index.find(t, f)
        self.clock += 1
        missing = slots < 0
        if touch and np.any(~missing):
            hit = slots[~missing]
            self.slab.add_at("count", hit, 1)
            self.slab.scatter("last", hit, self.clock)
        if np.any(missing):
            mt, mf, inv = unique_keys(t[missing], f[missing])
            new_slots = self._insert(mt, mf)
            slots[missing] = new_slots[inv]
            if touch:
                self.slab.add_at("count", slots[missing], 1)
                self.slab.scatter("last", slots[missing], self.clock)
        return slots, self.slab.gather("value", slots)

    def lookup_or_init(self, key: EmbeddingKey) -> np.ndarray:
        _, vec = self.lookup_or_init_batch([key.table_id], [key.feature_id])
        return vec[0]

    def _insert(self, t: np.ndarray, f: np.ndarray) -> np.ndarray:
        n = t.shape[0]
        if self.max_slots is not None:
            over = len(self) + n - self.max_slots
            if over > 0:
                if not self.eviction:
                    raise CapacityError(f"table full ({self.max_slots} slots) and eviction disabled")
                # keys touched by the current call are pinned even outside a step
                pin = self.clock if self.step_start is None else min(self.step_start, self.clock)
                if len(self._evict(over, pin)) < over:
                    raise CapacityError("cannot evict enough unpinned keys")
        self._reserve_index(n)
        slots = self.slab.alloc(n)
        self.slab.scatter("value", slots, init_vectors(t, f, self.dim, self.seed, self.init_scale))
        self.index.insert(t, f, slots)
        return slots

    def evict(self, n: int) -> List[EmbeddingKey]:
        """Remove up to ``n`` unpinned keys with the smallest (count, last_access, slot)."""
        return self._evict(n, self.step_start)

    def _evict(self, n: int, pin_from: Optional[int]) -> List[EmbeddingKey]:
        if n <= 0 or len(self) == 0:
            return []
        t, f, s = self.index.items()
        count = self.slab.gather("count", s)
        last = self.slab.gather("last", s)
        ok = np.ones(s.shape[0], dtype=bool)
        if pin_from is not None:
            ok = last < pin_from
        order = np.lexsort((s, last, count))
        order = order[ok[order]][:n]
        victims_t, victims_f, victims_s = t[order], f[order], s[order]
        self.index.delete(victims_t, victims_f)
        self.slab.release(victims_s)
        self.evicted_total += order.size
        return [EmbeddingKey(int(a), int(b)) for a, b in zip(victims_t, victims_f)]

    def read(self, slots: np.ndarray, name: str = "value") -> np.ndarray:
        return self.slab.gather(name, np.asarray(slots, dtype=np.int64))

    def write(self, slots: np.ndarray, values: np.ndarray, name: str = "value") -> None:
        self.slab.scatter(name, np.asarray(slots, dtype=np.int64), values)

    def metadata(self, key: EmbeddingKey) -> Tuple[int, int]:
        s = self.find([key.table_id], [key.feature_id])
        if s[0] < 0:
            raise KeyError(key)
        return int(self.read(s, "count")[0]), int(self.read(s, "last")[0])

    def keys(self) -> List[EmbeddingKey]:
        t, f, _ = self.index.items()
        return [EmbeddingKey(int(a), int(b)) for a, b in zip(t, f)]

    # checkpoint -------------------------------------------------------------

    _HEADER = struct.Struct("<8sIIQQQIqqQ")

    def save(self, fh) -> None:
        t, f, s = self.index.items()
        order = np.lexsort((f, t))
        t, f, s = t[order], f[order], s[order]
        n_alloc = self.slab.allocated
        fh.write(self._HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.dim, t.size, self.index.capacity,
            n_alloc, self.slab.chunk_size, self.index.seed, self.seed, self.clock,
        ))
        pairs = np.empty(t.size, dtype=[("t", "<i8"), ("f", "<u8"), ("slot", "<i8")])
        pairs["t"], pairs["f"], pairs["slot"] = t, f, s
        fh.write(pairs.tobytes())
        all_slots = np.arange(n_alloc, dtype=np.int64)
        for name in ValueSlab.VECTOR_FIELDS + ValueSlab.SCALAR_FIELDS:
            arr = self.slab.gather(name, all_slots)
            fh.write(arr.astype("<f8" if name in ValueSlab.VECTOR_FIELDS else "<i8").tobytes())
        free = np.array(sorted(self.slab.free), dtype="<i8")
        fh.write(struct.pack("<Q", free.size))
        fh.write(free.tobytes())

    @classmethod
    def load(cls, fh, **kwargs) -> "DynamicHashTable":
        raw = fh.read(cls._HEADER.size)
        magic, version, dim, n_live, cap, n_alloc, chunk, hash_seed, seed, clock = cls._HEADER.unpack(raw)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not an embedding table checkpoint")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        table = cls(dim, cap, chunk_size=chunk, seed=seed, hash_seed=hash_seed, **kwargs)
        table.clock = clock
        pairs = np.frombuffer(fh.read(n_live * 24), dtype=[("t", "<i8"), ("f", "<u8"), ("slot", "<i8")])
        table.slab.alloc(n_alloc)
        table.slab.free = []
        all_slots = np.arange(n_alloc, dtype=np.int64)
        for name in ValueSlab.VECTOR_FIELDS:
            arr = np.frombuffer(fh.read(n_alloc * dim * 8), dtype="<f8").reshape(n_alloc, dim)
            table.slab.scatter(name, all_slots, arr)
        for name in ValueSlab.SCALAR_FIELDS:
            table.slab.scatter(name, all_slots, np.frombuffer(fh.read(n_alloc * 8), dtype="<i8"))
        (n_free,) = struct.unpack("<Q", fh.read(8))
        table.slab.free = [int(x) for x in np.frombuffer(fh.read(n_free * 8), dtype="<i8")]
        if n_live:
            table.index.insert(pairs["t"].astype(np.int64), pairs["f"].astype(np.uint64),
                               pairs["slot"].astype(np.int64))
        return table


# ----------------------------------------------------------------------------
# sharded lookup
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ShardRouter:
    num_shards: int
    seed: int = 0

    def route(self, feature_ids) -> np.ndarray:
        f = np.asarray(feature_ids).astype(np.uint64)
        if self.num_shards == 1:
            return np.zeros(f.shape, dtype=np.int64)
        return (splitmix64(f ^ np.uint64(self.seed)) % np.uint64(self.num_shards)).astype(np.int64)


@dataclass
class TransferStats:
    """Ids moved at each stage; ``naive`` is the raw request count."""

    naive: int = 0
    after_stage1: int = 0
    after_stage2: int = 0

    @property
    def reduction(self) -> float:
        return 1.0 - self.after_stage2 / self.naive if self.naive else 0.0

    def __iadd__(self, other: "TransferStats") -> "TransferStats":
        self.naive += other.naive
        self.after_stage1 += other.after_stage1
        self.after_stage2 += other.after_stage2
        return self


@dataclass
class WorkerLookup:
    """One worker's deduplicated keys, their vectors and the map back to request order."""

    table_ids: np.ndarray
    feature_ids: np.ndarray
    unique_vectors: np.ndarray
    inverse: np.ndarray

    @property
    def vectors(self) -> np.ndarray:
        return self.unique_vectors[self.inverse]


def two_stage_dedup_lookup(
    requests: Sequence[Tuple[np.ndarray, np.ndarray]],
    router: ShardRouter,
    shards: Sequence[DynamicHashTable],
) -> Tuple[List[WorkerLookup], TransferStats]:
    """Look up per-worker key lists against sharded tables.

    Stage 1 dedups inside each worker before routing; stage 2 dedups the union of
    keys arriving at each shard. Vectors come back in each worker's original order
    via :attr:`WorkerLookup.vectors`.
    """
    if len(shards) != router.num_shards:
        raise ValueError("one table per shard required")
    stats = TransferStats()
    uniq = []
    outbox: List[List[Tuple[int, np.ndarray]]] = [[] for _ in shards]
    for w, (t, f) in enumerate(requests):
        t, f = _as_keys(t, f)
        stats.naive += t.size
        ut, uf, inv = unique_keys(t, f)
        stats.after_stage1 += ut.size
        uniq.append((ut, uf, inv))
        dest = router.route(uf)
        for sh in range(len(shards)):
            outbox[sh].append((w, np.nonzero(dest == sh)[0]))

    dim = shards[0].dim
    results = [np.empty((u[0].size, dim)) for u in uniq]
    for sh, table in enumerate(shards):
        arriving = [(w, pos) for w, pos in outbox[sh] if pos.size]
        if not arriving:
            continue
        at = np.concatenate([uniq[w][0][pos] for w, pos in arriving])
        af = np.concatenate([uniq[w][1][pos] for w, pos in arriving])
        st, sf, sinv = unique_keys(at, af)
        stats.after_stage2 += st.size
        _, vecs = table.lookup_or_init_batch(st, sf)
        back = vecs[sinv]
        off = 0
        for w, pos in arriving:
            results[w][pos] = back[off:off + pos.size]
            off += pos.size
    out = [WorkerLookup(u[0], u[1], r, u[2]) for u, r in zip(uniq, results)]
    return out, stats


def naive_lookup(requests: Sequence[Tuple[np.ndarray, np.ndarray]], table: DynamicHashTable) -> List[np.ndarray]:
    """Reference path: one lookup per requested id, no dedup, no sharding."""
    out = []
    for t, f in requests:
        t, f = _as_keys(t, f)
        out.append(np.stack([table.lookup_or_init(EmbeddingKey(int(a), int(b))) for a, b in zip(t, f)])
                   if t.size else np.empty((0, table.dim)))
    return out


# ----------------------------------------------------------------------------
# table merging
# ----------------------------------------------------------------------------


@dataclass
class PhysicalTable:
    name: str
    dim: int
    hyper: Tuple[Tuple[str, Hashable], ...]
    features: List[str] = field(default_factory=list)


@dataclass
class MergePlan:
    physical: Dict[str, PhysicalTable]
    logical: Dict[str, Tuple[str, int]]  # feature -> (physical name, table_id)

    def to_json(self) -> dict:
        return {
            "physical": {k: {"dim": p.dim, "hyper": [list(h) for h in p.hyper], "features": p.features}
                         for k, p in self.physical.items()},
            "logical": {k: list(v) for k, v in self.logical.items()},
        }


def merge_tables(schema: FeatureSchema, hyper: Optional[Mapping[str, Mapping[str, Hashable]]] = None) -> MergePlan:
    """Group logical feature tables with equal dim and hyperparameters into physical tables."""
    hyper = hyper or {}
    groups: Dict[Tuple[int, Tuple], PhysicalTable] = {}
    logical = {}
    for name in schema.all_features:
        dim = schema.dims[name]
        h = tuple(sorted(dict(hyper.get(name, {})).items()))
        key = (dim, h)
        if key not in groups:
            groups[key] = PhysicalTable(f"t{len(groups)}_d{dim}", dim, h)
        groups[key].features.append(name)
        logical[name] = (groups[key].name, schema.table_id(name))
    return MergePlan({p.name: p for p in groups.values()}, logical)


class ShardedEmbeddingStore:
    """All physical tables of a merge plan, each split across ``num_shards`` shards."""

    def __init__(self, plan: MergePlan, num_shards: int = 1, *, seed: int = 0,
                 initial_capacity: int = 1024, max_slots: Optional[int] = None, eviction: bool = True):
        self.plan = plan
        self.router = ShardRouter(num_shards, seed)
        self.seed = seed
        self.tables: Dict[str, List[DynamicHashTable]] = {}
        for name, phys in plan.physical.items():
            h = dict(phys.hyper)
            self.tables[name] = [
                DynamicHashTable(
                    phys.dim, initial_capacity, seed=seed, init_scale=h.get("init_scale"),
                    max_slots=h.get("max_slots", max_slots), eviction=h.get("eviction", eviction),
                )
                for _ in range(num_shards)
            ]
        self.stats: Dict[str, TransferStats] = {name: TransferStats() for name in plan.physical}

    def keys_for(self, feature: str, ids: np.ndarray) -> Tuple[str, np.ndarray, np.ndarray]:
        phys, tid = self.plan.logical[feature]
        ids = np.asarray(ids).astype(np.uint64)
        return phys, np.full(ids.shape[0], tid, dtype=np.int64), ids

    def begin_step(self) -> None:
        for shards in self.tables.values():
            for t in shards:
                t.begin_step()

    def end_step(self) -> None:
        for shards in self.tables.values():
            for t in shards:
                t.end_step()

    def lookup(self, phys: str, requests: Sequence[Tuple[np.ndarray, np.ndarray]]) -> List[WorkerLookup]:
        res, stats = two_stage_dedup_lookup(requests, self.router, self.tables[phys])
        self.stats[phys] += stats
        return res

    def lookup_feature(self, feature: str, ids: np.ndarray) -> np.ndarray:
        phys, t, f = self.keys_for(feature, ids)
        return self.lookup(phys, [(t, f)])[0].vectors

    def _by_shard(self, phys: str, t: np.ndarray, f: np.ndarray):
        dest = self.router.route(f)
        for sh, table in enumerate(self.tables[phys]):
            sel = np.nonzero(dest == sh)[0]
            if sel.size:
                slots = table.find(t[sel], f[sel])
                if np.any(slots < 0):
                    raise KeyError("update for a key that is not resident")
                yield table, sel, slots

    def peek(self, phys: str, t: np.ndarray, f: np.ndarray) -> np.ndarray:
        """Vectors without inserting or touching metadata; unseen keys get their init value."""
        t, f = _as_keys(t, f)
        shards = self.tables[phys]
        out = init_vectors(t, f, shards[0].dim, self.seed, shards[0].init_scale)
        dest = self.router.route(f)
        for sh, table in enumerate(shards):
            sel = np.nonzero(dest == sh)[0]
            if sel.size:
                slots = table.find(t[sel], f[sel])
                hit = slots >= 0
                out[sel[hit]] = table.read(slots[hit])
        return out

    def read(self, phys: str, t: np.ndarray, f: np.ndarray, name: str = "value") -> np.ndarray:
        t, f = _as_keys(t, f)
        out = np.empty((t.size, self.plan.physical[phys].dim))
        for table, sel, slots in self._by_shard(phys, t, f):
            out[sel] = table.read(slots, name)
        return out

    def adam_update(self, phys: str, t: np.ndarray, f: np.ndarray, g: np.ndarray,
                    lr: float, beta1: float, beta2: float, eps: float, step: int) -> None:
        """Lazy Adam: only the given rows' moments and values change."""
        t, f = _as_keys(t, f)
        for table, sel, slots in self._by_shard(phys, t, f):
            gs = g[sel]
            m = beta1 * table.read(slots, "m") + (1 - beta1) * gs
            v = beta2 * table.read(slots, "v") + (1 - beta2) * gs * gs
            mhat = m / (1 - beta1 ** step)
            vhat = v / (1 - beta2 ** step)
            table.write(slots, m, "m")
            table.write(slots, v, "v")
            table.write(slots, table.read(slots) - lr * mhat / (np.sqrt(vhat) + eps))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {"plan": self.plan.to_json(), "num_shards": self.router.num_shards, "seed": self.seed}
        (directory / "store.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        for name, shards in self.tables.items():
            for i, table in enumerate(shards):
                with open(directory / f"{name}.shard{i}.bin", "wb") as fh:
                    table.save(fh)

    def load_tables(self, directory) -> None:
        directory = Path(directory)
        for name, shards in self.tables.items():
            for i in range(len(shards)):
                with open(directory / f"{name}.shard{i}.bin", "rb") as fh:
                    old = shards[i]
                    shards[i] = DynamicHashTable.load(fh, max_slots=old.max_slots, eviction=old.eviction,
                                                      init_scale=old.init_scale)

    def snapshot(self) -> bytes:
        """All tables serialized in a fixed order (for equality checks)."""
        buf = io.BytesIO()
        for name in sorted(self.tables):
            for table in self.tables[name]:
                table.save(buf)
        return buf.getvalue()
