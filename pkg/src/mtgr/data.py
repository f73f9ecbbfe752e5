"""Feature taxonomy, user-level sample aggregation and token layout.

A user's exposures inside one window become a single :class:`AggregatedSample`
(profile, long static sequence, realtime sequence, K candidates). Tokenization
turns it into ``N_U + |S| + |R| + K`` tokens of width ``d_model``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN_ID = 0
DEFAULT_MAX_STATIC = 1000
DEFAULT_MAX_REALTIME = 100


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


class Group(IntEnum):
    PROFILE = 0
    STATIC = 1
    REALTIME = 2
    CANDIDATE = 3


def choose_embedding_dim(k: int, d_model: int) -> int:
    """Per-feature embedding width for a token assembled from ``k`` features."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return max(1, int(math.floor(d_model / k + 0.5)))


@dataclass(frozen=True)
class FeatureSchema:
    profile: Tuple[str, ...]
    sequence: Tuple[str, ...]
    candidate: Tuple[str, ...]
    cross: Tuple[str, ...]
    dims: Mapping[str, int]
    vocab: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        names = self.all_features
        if len(set(names)) != len(names):
            raise SchemaError("a feature may belong to only one group")
        if not self.sequence or not (self.candidate or self.cross):
            raise SchemaError("schema needs sequence features and candidate features")
        for n in names:
            if self.dims.get(n, 0) < 1:
                raise SchemaError(f"feature {n!r} has no positive embedding dim")

    @classmethod
    def build(
        cls,
        d_model: int,
        profile: Sequence[str],
        sequence: Sequence[str],
        candidate: Sequence[str],
        cross: Sequence[str] = (),
        vocab: Optional[Mapping[str, int]] = None,
    ) -> "FeatureSchema":
        dims: Dict[str, int] = {n: d_model for n in profile}
        e_seq = choose_embedding_dim(len(sequence), d_model)
        dims.update({n: e_seq for n in sequence})
        e_cand = choose_embedding_dim(len(candidate) + len(cross), d_model)
        dims.update({n: e_cand for n in list(candidate) + list(cross)})
        return cls(tuple(profile), tuple(sequence), tuple(candidate), tuple(cross), dims, dict(vocab or {}))

    @property
    def all_features(self) -> Tuple[str, ...]:
        return self.profile + self.sequence + self.candidate + self.cross

    def table_id(self, name: str) -> int:
        try:
            return self.all_features.index(name)
        except ValueError:
            raise SchemaError(f"unknown feature {name!r}") from None

    @property
    def sequence_width(self) -> int:
        return sum(self.dims[n] for n in self.sequence)

    @property
    def candidate_width(self) -> int:
        return sum(self.dims[n] for n in self.candidate + self.cross)

    def to_json(self) -> dict:
        return {
            "profile": list(self.profile),
            "sequence": list(self.sequence),
            "candidate": list(self.candidate),
            "cross": list(self.cross),
            "dims": dict(self.dims),
            "vocab": dict(self.vocab),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSchema":
        return cls(
            tuple(obj["profile"]), tuple(obj["sequence"]), tuple(obj["candidate"]),
            tuple(obj["cross"]), dict(obj["dims"]), dict(obj.get("vocab", {})),
        )


def infer_schema(samples: Sequence["AggregatedSample"], d_model: int) -> FeatureSchema:
    """Schema from feature names in first-seen order; vocab is the largest id seen."""
    groups: Dict[str, Dict[str, None]] = {"profile": {}, "sequence": {}, "candidate": {}, "cross": {}}
    vocab: Dict[str, int] = {}

    def see(group: str, values: Mapping[str, int]) -> None:
        for k, v in values.items():
            groups[group].setdefault(k)
            vocab[k] = max(vocab.get(k, 0), int(v))

    for s in samples:
        see("profile", s.profile)
        for it in list(s.static_seq) + list(s.realtime_seq):
            see("sequence", it.features)
        for c in s.candidates:
            see("candidate", c.features)
            see("cross", c.cross)
    if not groups["candidate"]:
        raise SchemaError("no candidate features found")
    return FeatureSchema.build(d_model, list(groups["profile"]), list(groups["sequence"]),
                               list(groups["candidate"]), list(groups["cross"]), vocab)


@dataclass
class InteractionItem:
    features: Dict[str, int]
    ts: int = 0


@dataclass
class Candidate:
    features: Dict[str, int]
    cross: Dict[str, int]
    request_ts: int
    click: int = 0
    purchase: int = 0

    def __post_init__(self):
        if self.request_ts <= 0:
            raise DataError("candidate request_ts must be positive")
        if self.click not in (0, 1) or self.purchase not in (0, 1):
            raise DataError("labels must be 0/1")
        if self.purchase and not self.click:
            raise DataError("purchase=1 requires click=1")


@dataclass
class AggregatedSample:
    user_id: int
    profile: Dict[str, int]
    static_seq: List[InteractionItem]
    realtime_seq: List[InteractionItem]
    candidates: List[Candidate]

    def validate(self) -> None:
        if not self.candidates:
            raise DataError(f"user {self.user_id}: sample needs K >= 1 candidates")
        ts = [it.ts for it in self.realtime_seq]
        if any(t <= 0 for t in ts):
            raise DataError(f"user {self.user_id}: realtime items need timestamps")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError(f"user {self.user_id}: realtime sequence must be strictly time-ordered")

    @property
    def num_tokens_without_profile(self) -> int:
        return len(self.static_seq) + len(self.realtime_seq) + len(self.candidates)

    def num_tokens(self, schema: FeatureSchema) -> int:
        return len(schema.profile) + self.num_tokens_without_profile


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (L, d_model)
    tags: np.ndarray  # (L,) Group values
    timestamps: np.ndarray  # (L,) int64, 0 for profile/static
    candidate_index: np.ndarray  # (L,) index into sample.candidates, -1 elsewhere

    def __len__(self) -> int:
        return int(self.tags.shape[0])


# ----------------------------------------------------------------------------
# aggregation
# ----------------------------------------------------------------------------


@dataclass
class ExposureRecord:
    """One logged exposure: a candidate plus the user's state snapshot at request time."""

    user_id: int
    request_ts: int
    candidate: Candidate
    profile: Dict[str, int]
    static_seq: List[InteractionItem]
    realtime_seq: List[InteractionItem]


@dataclass
class AggregationStats:
    profile_conflicts: int = 0
    dropped_realtime: int = 0


def aggregate_by_user(
    records: Iterable[ExposureRecord],
    window: Optional[int] = 3600,
    stats: Optional[AggregationStats] = None,
    max_static: int = DEFAULT_MAX_STATIC,
    max_realtime: int = DEFAULT_MAX_REALTIME,
) -> List[AggregatedSample]:
    """Merge one user's records inside one window into a single sample.

    Windows are aligned buckets ``request_ts // window``; ``window=None`` groups by
    request (inference mode). Conflicting profile snapshots resolve latest-wins and
    are counted in ``stats``. Realtime items outside the window are dropped.
    """
    stats = stats if stats is not None else AggregationStats()
    groups: Dict[Tuple[int, int], List[Tuple[int, ExposureRecord]]] = {}
    for order, rec in enumerate(records):
        bucket = rec.request_ts if window is None else rec.request_ts // window
        groups.setdefault((rec.user_id, bucket), []).append((order, rec))

    samples = []
    for (user_id, bucket), items in groups.items():
        latest = max(items, key=lambda it: (it[1].request_ts, it[0]))[1]
        if any(rec.profile != latest.profile for _, rec in items):
            stats.profile_conflicts += 1
            logger.warning("user %s: conflicting profile snapshots, keeping latest", user_id)
        if window is None:
            lo, hi = -math.inf, math.inf
        else:
            lo, hi = bucket * window, (bucket + 1) * window
        realtime: Dict[int, InteractionItem] = {}
        for _, rec in items:
            for it in rec.realtime_seq:
                if not lo <= it.ts < hi:
                    stats.dropped_realtime += 1
                    continue
                realtime.setdefault(it.ts, it)
        cands = sorted(items, key=lambda it: (-it[1].request_ts, it[0]))
        sample = AggregatedSample(
            user_id=user_id,
            profile=dict(latest.profile),
            static_seq=list(latest.static_seq),
            realtime_seq=[realtime[t] for t in sorted(realtime)],
            candidates=[rec.candidate for _, rec in cands],
        )
        samples.append(truncate(sample, max_static, max_realtime))
    return samples


def truncate(sample: AggregatedSample, max_static: int = DEFAULT_MAX_STATIC,
             max_realtime: int = DEFAULT_MAX_REALTIME) -> AggregatedSample:
    """Keep the most recent ``max_static`` / ``max_realtime`` items (lists are oldest-first)."""
    s = sample.static_seq[-max_static:] if max_static > 0 else []
    r = sample.realtime_seq[-max_realtime:] if max_realtime > 0 else []
    if len(s) == len(sample.static_seq) and len(r) == len(sample.realtime_seq):
        return sample
    return AggregatedSample(sample.user_id, sample.profile, s, r, sample.candidates)


# ----------------------------------------------------------------------------
# tokenization
# ----------------------------------------------------------------------------


def token_layout(sample: AggregatedSample, schema: FeatureSchema) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Group tags, timestamps and candidate indices, block order U, S, R, candidates."""
    n_u, n_s, n_r, k = len(schema.profile), len(sample.static_seq), len(sample.realtime_seq), len(sample.candidates)
    tags = np.concatenate([
        np.full(n_u, Group.PROFILE), np.full(n_s, Group.STATIC),
        np.full(n_r, Group.REALTIME), np.full(k, Group.CANDIDATE),
    ]).astype(np.int64)
    ts = np.zeros(n_u + n_s + n_r + k, dtype=np.int64)
    ts[n_u + n_s:n_u + n_s + n_r] = [it.ts for it in sample.realtime_seq]
    ts[n_u + n_s + n_r:] = [c.request_ts for c in sample.candidates]
    cidx = np.full(tags.shape[0], -1, dtype=np.int64)
    cidx[n_u + n_s + n_r:] = np.arange(k)
    return tags, ts, cidx


def _ids(values: Mapping[str, int], names: Sequence[str]) -> List[int]:
    return [int(values.get(n, UNKNOWN_ID)) for n in names]


def check_features(sample: AggregatedSample, schema: FeatureSchema) -> None:
    known = set(schema.all_features)

    def check(d: Mapping[str, int], allowed: Sequence[str], where: str):
        for name in d:
            if name not in allowed:
                kind = "unknown" if name not in known else "misplaced"
                raise SchemaError(f"user {sample.user_id}: {kind} feature {name!r} in {where}")

    check(sample.profile, schema.profile, "profile")
    for it in sample.static_seq + sample.realtime_seq:
        check(it.features, schema.sequence, "sequence item")
    for c in sample.candidates:
        check(c.features, schema.candidate, "candidate")
        check(c.cross, schema.cross, "cross")


def feature_ids(sample: AggregatedSample, schema: FeatureSchema) -> Dict[str, np.ndarray]:
    """Id arrays per feature name: profile -> (N_U,), sequence -> (|S|+|R|,), candidate/cross -> (K,)."""
    items = sample.static_seq + sample.realtime_seq
    out: Dict[str, np.ndarray] = {}
    for n in schema.profile:
        out[n] = np.array([int(sample.profile.get(n, UNKNOWN_ID))], dtype=np.int64)
    for n in schema.sequence:
        out[n] = np.array([int(it.features.get(n, UNKNOWN_ID)) for it in items], dtype=np.int64)
    for n in schema.candidate:
        out[n] = np.array([int(c.features.get(n, UNKNOWN_ID)) for c in sample.candidates], dtype=np.int64)
    for n in schema.cross:
        out[n] = np.array([int(c.cross.get(n, UNKNOWN_ID)) for c in sample.candidates], dtype=np.int64)
    return out


def tokenize(
    sample: AggregatedSample,
    schema: FeatureSchema,
    lookup: Callable[[str, np.ndarray], np.ndarray],
    projections: Mapping[str, np.ndarray],
    d_model: int,
) -> TokenSequence:
    """Build the token matrix for one sample.

    ``lookup(feature, ids)`` returns embedding rows. Profile features embed straight
    to ``d_model``; sequence items and candidates go through
    ``concat(embeddings) @ W + b`` using ``projections['seq_w'/'seq_b'/'cand_w'/'cand_b']``.
    """
    check_features(sample, schema)
    ids = feature_ids(sample, schema)
    parts = []
    for n in schema.profile:
        v = lookup(n, ids[n])
        if v.shape[-1] != d_model:
            raise SchemaError(f"profile feature {n!r} must embed to d_model={d_model}")
        parts.append(v)
    n_items = len(sample.static_seq) + len(sample.realtime_seq)
    if n_items:
        seq = np.concatenate([lookup(n, ids[n]) for n in schema.sequence], axis=1)
        parts.append(seq @ projections["seq_w"] + projections["seq_b"])
    cand = np.concatenate([lookup(n, ids[n]) for n in schema.candidate + schema.cross], axis=1)
    parts.append(cand @ projections["cand_w"] + projections["cand_b"])
    tokens = np.concatenate(parts, axis=0)
    tags, ts, cidx = token_layout(sample, schema)
    return TokenSequence(tokens, tags, ts, cidx)


# ----------------------------------------------------------------------------
# JSONL dataset format
# ----------------------------------------------------------------------------

_SAMPLE_KEYS = {"user_id", "profile", "static_seq", "realtime_seq", "candidates"}
_ITEM_KEYS = {"features", "ts"}
_CAND_KEYS = {"features", "cross", "request_ts", "click", "purchase"}


def _exact_keys(obj: dict, keys: set, where: str) -> None:
    if not isinstance(obj, dict) or set(obj) != keys:
        got = sorted(obj) if isinstance(obj, dict) else type(obj).__name__
        raise DataError(f"{where}: expected fields {sorted(keys)}, got {got}")


def sample_to_json(sample: AggregatedSample) -> dict:
    return {
        "user_id": sample.user_id,
        "profile": dict(sample.profile),
        "static_seq": [{"features": dict(it.features), "ts": it.ts} for it in sample.static_seq],
        "realtime_seq": [{"features": dict(it.features), "ts": it.ts} for it in sample.realtime_seq],
        "candidates": [
            {"features": dict(c.features), "cross": dict(c.cross), "request_ts": c.request_ts,
             "click": c.click, "purchase": c.purchase}
            for c in sample.candidates
        ],
    }


def sample_from_json(obj: dict, where: str = "sample") -> AggregatedSample:
    _exact_keys(obj, _SAMPLE_KEYS, where)
    items = {}
    for key in ("static_seq", "realtime_seq"):
        lst = []
        for i, it in enumerate(obj[key]):
            _exact_keys(it, _ITEM_KEYS, f"{where}.{key}[{i}]")
            lst.append(InteractionItem({k: int(v) for k, v in it["features"].items()}, int(it["ts"])))
        items[key] = lst
    cands = []
    for i, c in enumerate(obj["candidates"]):
        _exact_keys(c, _CAND_KEYS, f"{where}.candidates[{i}]")
        cands.append(Candidate(
            {k: int(v) for k, v in c["features"].items()},
            {k: int(v) for k, v in c["cross"].items()},
            int(c["request_ts"]), int(c["click"]), int(c["purchase"]),
        ))
    sample = AggregatedSample(
        int(obj["user_id"]), {k: int(v) for k, v in obj["profile"].items()},
        items["static_seq"], items["realtime_seq"], cands,
    )
    sample.validate()
    return sample


def dump_jsonl(samples: Iterable[AggregatedSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s), separators=(",", ":"), sort_keys=True))
            fh.write("\n")


def load_jsonl(path, max_static: int = DEFAULT_MAX_STATIC,
               max_realtime: int = DEFAULT_MAX_REALTIME) -> List[AggregatedSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}:{exc.colno}: {exc.msg}") from None
            samples.append(truncate(sample_from_json(obj, f"{path}:{lineno}"), max_static, max_realtime))
    return samples
