"""Self-checks backing the diagnostic CLI subcommands."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import AggregatedSample, FeatureSchema, Group
from .embedding import ShardedEmbeddingStore, TransferStats, merge_tables
from .encoder import HstuConfig, MaskMatrix, build_dynamic_mask, candidate_logits, encode, init_params, loss, to_tensors
from .model import lookup_batch, prepare_batch
from .trainer import default_step_tokens, plan_dynamic_batches, schedule_epoch

# Two profile tokens, two static items, two realtime items listed newest first and
# three candidates: target1 after both realtime items, target2 between them,
# target3 before both.
EXAMPLE_LABELS = ("age", "ctr", "seq1", "seq2", "rt1", "rt2", "target1", "target2", "target3")
FIG_TAGS = (Group.PROFILE, Group.PROFILE, Group.STATIC, Group.STATIC,
            Group.REALTIME, Group.REALTIME, Group.CANDIDATE, Group.CANDIDATE, Group.CANDIDATE)
FIG_TIMESTAMPS = (0, 0, 0, 0, 50, 40, 60, 45, 30)


def example_mask(mode: str = "dynamic") -> MaskMatrix:
    return build_dynamic_mask(np.array(FIG_TAGS), np.array(FIG_TIMESTAMPS), mode)


def random_token_layout(length: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Tags and timestamps for ``length`` tokens with every group present when length >= 4."""
    if length < 1:
        raise ValueError("length must be >= 1")
    n_c = max(1, length // 4)
    rest = length - n_c
    n_p = min(rest, max(0, rest // 3))
    n_s = min(rest - n_p, max(0, rest // 3))
    n_r = rest - n_p - n_s
    tags = np.array([Group.PROFILE] * n_p + [Group.STATIC] * n_s + [Group.REALTIME] * n_r + [Group.CANDIDATE] * n_c)
    ts = np.zeros(length, dtype=np.int64)
    ts[n_p + n_s:n_p + n_s + n_r] = np.sort(rng.choice(np.arange(1, 1000), n_r, replace=False))
    ts[length - n_c:] = rng.integers(1, 1000, n_c)
    return tags, ts


def grad_check_encoder(cfg: HstuConfig, length: int = 12, seed: int = 0, step: float = 1e-5) -> Dict[str, float]:
    """Finite-difference check of encoder + head + loss; max relative error per module."""
    rng = np.random.default_rng(seed)
    tags, ts = random_token_layout(length, rng)
    mask = build_dynamic_mask(tags, ts, cfg.mask_mode).values
    raw = init_params(cfg, rng)
    for k in raw:  # move off the zero/one init so every path carries gradient
        raw[k] = raw[k] + rng.normal(0.0, 0.1, raw[k].shape)
    params = to_tensors(raw)
    x = T.Tensor(rng.normal(size=(length, cfg.d_model)), requires_grad=True, name="input")
    n_c = int((tags == Group.CANDIDATE).sum())
    click = rng.integers(0, 2, n_c)
    purchase = click * rng.integers(0, 2, n_c)

    def f():
        return loss(candidate_logits(encode(x, mask, tags, params, cfg), tags, params), click, purchase)

    with T.default_dtype(np.float64):
        report = T.finite_diff_check(f, {**params, "input": x}, step=step)
    per: Dict[str, float] = defaultdict(float)
    for name, err in report.errors.items():
        module = name.rsplit(".", 1)[0] if "." in name else name
        per[module] = max(per[module], err)
    return dict(sorted(per.items()))


@dataclass
class DedupReport:
    per_table: Dict[str, TransferStats]
    steps: int

    @property
    def total(self) -> TransferStats:
        t = TransferStats()
        for s in self.per_table.values():
            t += s
        return t

    def to_json(self) -> dict:
        def one(s: TransferStats) -> dict:
            return {
                "naive": s.naive,
                "after_stage1": s.after_stage1,
                "after_stage2": s.after_stage2,
                "stage1_reduction": 1.0 - s.after_stage1 / s.naive if s.naive else 0.0,
                "reduction": s.reduction,
            }

        return {"steps": self.steps, "total": one(self.total),
                "tables": {k: one(v) for k, v in self.per_table.items()}}


def dedup_stats(samples: Sequence[AggregatedSample], schema: FeatureSchema, num_workers: int,
                num_shards: int, token_budget: int, max_steps: int = 0) -> DedupReport:
    """Replay one epoch of lookups and tally ids moved by each dedup stage."""
    store = ShardedEmbeddingStore(merge_tables(schema), num_shards)
    lengths = np.array([s.num_tokens(schema) for s in samples])
    step_tokens = default_step_tokens(num_workers, token_budget, int(lengths.max()))
    steps = 0
    for chunk in schedule_epoch(lengths, step_tokens):
        if max_steps and steps >= max_steps:
            break
        plan = plan_dynamic_batches(lengths[chunk], num_workers, token_budget)
        batches = [prepare_batch([samples[chunk[i]] for i in a], schema, store.plan)
                   for a in plan.assignments if a]
        store.begin_step()
        lookup_batch(store, batches)
        store.end_step()
        steps += 1
    return DedupReport(dict(store.stats), steps)
