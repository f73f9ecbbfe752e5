"""Batched ranking model: sparse lookups -> tokens -> encoder -> candidate logits.

Samples of different lengths are padded to a common ``L``; padded columns are
masked out and the length normalizer uses each sample's true length, so a
padded batch computes exactly what per-sample forwards would.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import AggregatedSample, FeatureSchema, Group, check_features, feature_ids, token_layout
from .embedding import MergePlan, ShardedEmbeddingStore, WorkerLookup, unique_keys
from .encoder import HstuConfig, build_dynamic_mask, encode, head_forward, init_params, loss, to_tensors
from .tensor import Tensor


def init_model_params(schema: FeatureSchema, cfg: HstuConfig, seed: int) -> Dict[str, np.ndarray]:
    """Dense parameters: token projections plus encoder and head."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    p = {
        "seq_w": rng.normal(0.0, 1.0 / np.sqrt(schema.sequence_width), (schema.sequence_width, d)),
        "seq_b": np.zeros(d),
        "cand_w": rng.normal(0.0, 1.0 / np.sqrt(schema.candidate_width), (schema.candidate_width, d)),
        "cand_b": np.zeros(d),
    }
    p.update(init_params(cfg, rng))
    return p


@dataclass
class Batch:
    """Padded token layout and sparse-key requests for a list of samples."""

    size: int
    max_len: int
    lengths: np.ndarray  # (B,)
    tags: np.ndarray  # (B, Lmax)
    mask: np.ndarray  # (B, Lmax, Lmax)
    requests: Dict[str, Tuple[np.ndarray, np.ndarray]]  # physical table -> (table_ids, feature_ids)
    feature_slices: Dict[str, Tuple[str, int, int]]  # feature -> (physical, start, stop) into requests
    profile_rows: Dict[str, np.ndarray]
    seq_rows: np.ndarray
    cand_rows: np.ndarray  # flat row index of every candidate token
    cand_sample: np.ndarray
    click: np.ndarray
    purchase: np.ndarray
    weights: np.ndarray
    user_ids: np.ndarray


def prepare_batch(samples: Sequence[AggregatedSample], schema: FeatureSchema, plan: MergePlan,
                  mask_mode: str = "dynamic") -> Batch:
    bsz = len(samples)
    n_u = len(schema.profile)
    lengths = np.array([s.num_tokens(schema) for s in samples], dtype=np.int64)
    lmax = int(lengths.max())
    tags = np.zeros((bsz, lmax), dtype=np.int64)
    mask = np.zeros((bsz, lmax, lmax))
    ids: Dict[str, List[np.ndarray]] = {n: [] for n in schema.all_features}
    seq_rows, cand_rows, cand_sample = [], [], []
    click, purchase, weights = [], [], []
    for b, s in enumerate(samples):
        check_features(s, schema)
        tg, ts, _ = token_layout(s, schema)
        n = tg.shape[0]
        tags[b, :n] = tg
        mask[b, :n, :n] = build_dynamic_mask(tg, ts, mask_mode).values
        for name, arr in feature_ids(s, schema).items():
            ids[name].append(arr)
        base = b * lmax
        n_items = len(s.static_seq) + len(s.realtime_seq)
        seq_rows.append(base + n_u + np.arange(n_items))
        k = len(s.candidates)
        cand_rows.append(base + n_u + n_items + np.arange(k))
        cand_sample.append(np.full(k, b))
        click.extend(c.click for c in s.candidates)
        purchase.extend(c.purchase for c in s.candidates)
        weights.extend([1.0 / (k * bsz)] * k)

    requests: Dict[str, Tuple[List[np.ndarray], List[np.ndarray]]] = {}
    slices = {}
    for name in schema.all_features:
        phys, tid = plan.logical[name]
        f = np.concatenate(ids[name]).astype(np.uint64)
        tl, fl = requests.setdefault(phys, ([], []))
        start = sum(a.size for a in fl)
        tl.append(np.full(f.size, tid, dtype=np.int64))
        fl.append(f)
        slices[name] = (phys, start, start + f.size)
    profile_rows = {name: np.arange(bsz) * lmax + i for i, name in enumerate(schema.profile)}
    return Batch(
        size=bsz, max_len=lmax, lengths=lengths, tags=tags, mask=mask,
        requests={p: (np.concatenate(t), np.concatenate(f)) for p, (t, f) in requests.items()},
        feature_slices=slices, profile_rows=profile_rows,
        seq_rows=np.concatenate(seq_rows).astype(np.int64),
        cand_rows=np.concatenate(cand_rows).astype(np.int64),
        cand_sample=np.concatenate(cand_sample).astype(np.int64),
        click=np.array(click, dtype=np.float64), purchase=np.array(purchase, dtype=np.float64),
        weights=np.array(weights), user_ids=np.array([s.user_id for s in samples]),
    )


def assemble_tokens(batch: Batch, schema: FeatureSchema, emb: Mapping[str, Tensor],
                    lookups: Mapping[str, WorkerLookup], params: Mapping[str, Tensor]) -> Tensor:
    """Token tensor (B, Lmax, d) from unique-row embedding leaves ``emb[physical]``."""

    def feature(name: str) -> Tensor:
        phys, start, stop = batch.feature_slices[name]
        return T.take(emb[phys], lookups[phys].inverse[start:stop])

    parts = [(feature(n), batch.profile_rows[n]) for n in schema.profile]
    if batch.seq_rows.size:
        seq = T.concat([feature(n) for n in schema.sequence], axis=1)
        parts.append((T.add(T.matmul(seq, params["seq_w"]), params["seq_b"]), batch.seq_rows))
    cand = T.concat([feature(n) for n in schema.candidate + schema.cross], axis=1)
    parts.append((T.add(T.matmul(cand, params["cand_w"]), params["cand_b"]), batch.cand_rows))
    d = params["cand_w"].shape[1]
    flat = T.scatter_rows(batch.size * batch.max_len, parts)
    return T.reshape(flat, (batch.size, batch.max_len, d))


def forward(batch: Batch, schema: FeatureSchema, cfg: HstuConfig, emb: Mapping[str, Tensor],
            lookups: Mapping[str, WorkerLookup], params: Mapping[str, Tensor]) -> Tensor:
    """Candidate logits (N_cand, 2) in batch order."""
    x = assemble_tokens(batch, schema, emb, lookups, params)
    h = encode(x, batch.mask, batch.tags, params, cfg, batch.lengths)
    rows = T.take(T.reshape(h, (batch.size * batch.max_len, cfg.d_model)), batch.cand_rows)
    return head_forward(rows, params)


def batch_loss(logits: Tensor, batch: Batch) -> Tensor:
    """Mean over samples of (mean over that sample's candidates of the two BCE terms)."""
    return loss(logits, batch.click, batch.purchase, batch.weights)


def lookup_batch(store: ShardedEmbeddingStore, batches: Sequence[Batch]) -> List[Dict[str, WorkerLookup]]:
    """Two-stage dedup lookup for several workers' batches at once."""
    out: List[Dict[str, WorkerLookup]] = [{} for _ in batches]
    for phys in store.plan.physical:
        reqs = [b.requests[phys] for b in batches]
        for w, res in enumerate(store.lookup(phys, reqs)):
            out[w][phys] = res
    return out


def score(samples: Sequence[AggregatedSample], schema: FeatureSchema, cfg: HstuConfig,
          params: Mapping[str, np.ndarray], store: ShardedEmbeddingStore, batch_size: int = 64) -> np.ndarray:
    """Inference logits (N_cand, 2) for samples in order; the store is not modified."""
    tp = to_tensors(params, requires_grad=False)
    out = []
    for i in range(0, len(samples), batch_size):
        batch = prepare_batch(samples[i:i + batch_size], schema, store.plan, cfg.mask_mode)
        lk = {}
        for phys, (t, f) in batch.requests.items():
            ut, uf, inv = unique_keys(t, f)
            lk[phys] = WorkerLookup(ut, uf, store.peek(phys, ut, uf), inv)
        emb = {p: Tensor(l.unique_vectors) for p, l in lk.items()}
        out.append(forward(batch, schema, cfg, emb, lk, tp).data)
    return np.concatenate(out) if out else np.empty((0, 2))
