"""Ranking metrics and an analytical FLOPs estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .data import FeatureSchema
from .encoder import HstuConfig


class UndefinedMetricError(ValueError):
    """AUC needs at least one positive and one negative."""


class ScoredImpression(NamedTuple):
    user_id: int
    score: float
    label: int


def _arrays(impressions: Iterable[ScoredImpression]):
    imps = list(impressions)
    users = np.array([i.user_id for i in imps])
    scores = np.array([i.score for i in imps], dtype=np.float64)
    labels = np.array([i.label for i in imps], dtype=np.int64)
    return users, scores, labels


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [xs.size]])
    avg = (starts + ends + 1) / 2.0  # mean of ranks start+1 .. end
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined for single-class input")
    r = midranks(scores)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_of(impressions: Iterable[ScoredImpression]) -> float:
    _, s, y = _arrays(impressions)
    return auc(s, y)


def per_user_auc(user_ids, scores, labels) -> Dict[object, Tuple[float, int]]:
    """AUC and impression count for every user that has both classes."""
    user_ids = np.asarray(user_ids)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(user_ids, kind="mergesort")
    uids = user_ids[order]
    cuts = np.flatnonzero(uids[1:] != uids[:-1]) + 1
    out = {}
    for idx in np.split(order, cuts):
        if idx.size == 0:
            continue
        y = labels[idx]
        if 0 < y.sum() < y.size:
            out[user_ids[idx[0]].item()] = (auc(scores[idx], y), int(idx.size))
    return out


def gauc(user_ids, scores, labels, weighted: bool = False) -> float:
    """Mean per-user AUC over users with both a positive and a negative.

    Unweighted by default; ``weighted=True`` weights each user by impression count.
    """
    per = per_user_auc(user_ids, scores, labels)
    if not per:
        raise UndefinedMetricError("GAUC undefined: no user has both classes")
    if weighted:
        return math.fsum(a * n for a, n in per.values()) / sum(n for _, n in per.values())
    return math.fsum(a for a, _ in per.values()) / len(per)


def gauc_of(impressions: Iterable[ScoredImpression], weighted: bool = False) -> float:
    u, s, y = _arrays(impressions)
    return gauc(u, s, y, weighted)


def safe_metric(fn, *args, **kwargs) -> Optional[float]:
    try:
        return fn(*args, **kwargs)
    except UndefinedMetricError:
        return None


# ----------------------------------------------------------------------------
# FLOPs
# ----------------------------------------------------------------------------


@dataclass
class FlopsReport:
    """FLOPs for one aggregated sample. Matmuls count 2*m*n*k; the gate counts one per element."""

    breakdown: Dict[str, int] = field(default_factory=dict)
    num_candidates: int = 1

    @property
    def total(self) -> int:
        return sum(self.breakdown.values())

    @property
    def per_candidate(self) -> float:
        return self.total / self.num_candidates


def flops_estimate(cfg: HstuConfig, lengths: Tuple[int, int, int, int], schema: FeatureSchema) -> FlopsReport:
    """Closed-form forward cost for token counts ``(N_U, |S|, |R|, K)``.

    Profile tokens are plain lookups and cost nothing. Norms, silu and the
    length normalizer are not counted.
    """
    n_u, n_s, n_r, k = lengths
    if k < 1:
        raise ValueError("need at least one candidate")
    d = cfg.d_model
    n = n_u + n_s + n_r + k
    b = {
        "token_projection": 2 * (n_s + n_r) * schema.sequence_width * d + 2 * k * schema.candidate_width * d,
    }
    layer = {
        "qkvu_projection": 4 * 2 * n * d * d,
        "pairwise_scores": 2 * n * n * d,
        "value_mix": 2 * n * n * d,
        "gate": n * d,
        "mlp": 2 * 2 * n * d * d,
    }
    for name, v in layer.items():
        b[name] = cfg.n_layer * v
    h = cfg.head_hidden
    b["output_head"] = k * (2 * d * h + 2 * h * 2)
    return FlopsReport(b, k)
