"""Seeded synthetic dataset with a planted click model.

Click probability is
``sigmoid(bias + w_cross*z_cross + w_seq*z_seq + w_profile*z_profile + w_taste*z_taste)``:

* ``z_cross``: latent user x item affinity; the ``affinity`` cross feature is
  its quantile bucket, so it carries more than the item id does.
* ``z_seq``: how many of the candidate's category the user touched in the
  realtime sequence *before* the request (plus a weaker long-term term from
  the static sequence). Realtime items after the request carry no signal.
* ``z_profile``: additive effects of the profile feature values.
* ``z_taste``: a random (profile value x item category) effect table summed over
  the profile features. It varies across one user's candidates and is high
  rank; off by default. Candidates read profile tokens through length-normalized
  attention, so small models at desk scale learn little of it.

Purchases are drawn only among clicks. ``bias`` is solved so the mean click
probability hits ``click_rate``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import AggregatedSample, Candidate, FeatureSchema, InteractionItem, dump_jsonl

T0 = 1_700_000_000 - (1_700_000_000 % 3600)

PROFILE_FEATURES = ("age", "gender", "city")
SEQUENCE_FEATURES = ("seq_item", "seq_cat")
CANDIDATE_FEATURES = ("item_id", "item_cat")
CROSS_FEATURES = ("affinity", "pv")


@dataclass
class GenConfig:
    num_users: int = 10_000
    seed: int = 0
    k_mean: float = 6.0
    k_max: int = 16
    static_min: int = 5
    static_alpha: float = 1.2
    static_cap: int = 1000
    realtime_min: int = 1
    realtime_alpha: float = 1.5
    realtime_cap: int = 100
    num_items: int = 5000
    num_categories: int = 40
    profile_vocab: int = 20
    affinity_buckets: int = 20
    pv_vocab: int = 10
    latent_dim: int = 8
    window: int = 3600
    num_windows: int = 240
    w_cross: float = 1.5
    w_seq: float = 1.0
    w_profile: float = 0.5
    w_taste: float = 0.0
    click_rate: float = 0.045
    purchase_rate: float = 0.17
    match_prob: float = 0.5

    def __post_init__(self):
        if not 0 < self.click_rate < 1 or not 0 < self.purchase_rate < 1:
            raise ValueError("base rates must be in (0, 1)")
        if self.k_max < 1 or self.k_mean < 1:
            raise ValueError("need at least one candidate per user")


def default_schema(d_model: int, cfg: Optional[GenConfig] = None) -> FeatureSchema:
    cfg = cfg or GenConfig()
    vocab = {n: cfg.profile_vocab for n in PROFILE_FEATURES}
    vocab.update(seq_item=cfg.num_items, item_id=cfg.num_items, seq_cat=cfg.num_categories,
                 item_cat=cfg.num_categories, affinity=cfg.affinity_buckets, pv=cfg.pv_vocab)
    return FeatureSchema.build(d_model, PROFILE_FEATURES, SEQUENCE_FEATURES, CANDIDATE_FEATURES,
                               CROSS_FEATURES, vocab)


def truncated_pareto(rng: np.random.Generator, n: int, alpha: float, lo: int, hi: int) -> np.ndarray:
    """Integer lengths in [lo, hi] from a Pareto tail, truncated by inverse-CDF sampling."""
    u = rng.random(n)
    a = alpha
    lo_f, hi_f = float(lo), float(hi) + 1.0
    x = (lo_f ** -a - u * (lo_f ** -a - hi_f ** -a)) ** (-1.0 / a)
    return np.clip(np.floor(x).astype(np.int64), lo, hi)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def expected_auc(p: np.ndarray) -> float:
    """AUC of scoring by the true probability, in expectation over the labels."""
    p = np.asarray(p, dtype=np.float64)
    q = 1.0 - p
    order = np.argsort(p, kind="mergesort")
    ps, qs = p[order], q[order]
    uniq, start = np.unique(ps, return_index=True)
    counts = np.diff(np.append(start, ps.size))
    q_group = np.add.reduceat(qs, start)
    below = np.concatenate([[0.0], np.cumsum(q_group)[:-1]])
    below_each = np.repeat(below, counts)
    tie_each = np.repeat(q_group, counts) - qs
    num = float(np.sum(ps * (below_each + 0.5 * tie_each)))
    den = float(np.sum(ps * (qs.sum() - qs)))
    return num / den


def _solve_bias(signal: np.ndarray, target: float, weights: Optional[np.ndarray] = None) -> float:
    """Bias b with weighted mean of sigmoid(b + signal) equal to ``target`` (bisection)."""
    w = np.ones_like(signal) if weights is None else weights
    lo, hi = -30.0, 30.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.average(_sigmoid(mid + signal), weights=w) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


@dataclass
class GeneratedData:
    samples: List[AggregatedSample]
    manifest: dict
    factors: Dict[str, np.ndarray]  # per candidate, in file order


def generate(cfg: GenConfig) -> GeneratedData:
    rng = np.random.default_rng(cfg.seed)
    r = cfg.latent_dim
    n_items, n_cat = cfg.num_items, cfg.num_categories
    item_vec = rng.normal(0, 1 / np.sqrt(r), (n_items + 1, r))
    item_cat = rng.integers(1, n_cat + 1, n_items + 1)
    items_by_cat = [np.flatnonzero(item_cat == c) for c in range(n_cat + 1)]
    items_by_cat = [a[a > 0] for a in items_by_cat]
    profile_effect = rng.normal(0, 1, (len(PROFILE_FEATURES), cfg.profile_vocab + 1))

    n = cfg.num_users
    user_vec = rng.normal(0, 1 / np.sqrt(r), (n, r))
    static_len = truncated_pareto(rng, n, cfg.static_alpha, cfg.static_min, cfg.static_cap)
    rt_len = truncated_pareto(rng, n, cfg.realtime_alpha, cfg.realtime_min, min(cfg.realtime_cap, cfg.window - 1))
    k = np.minimum(1 + rng.poisson(cfg.k_mean - 1, n), cfg.k_max)

    def pick_item(cat: int) -> int:
        pool = items_by_cat[cat]
        return int(pool[rng.integers(pool.size)]) if pool.size else int(rng.integers(1, n_items + 1))

    raw = []
    for u in range(n):
        profile = {f: int(rng.integers(1, cfg.profile_vocab + 1)) for f in PROFILE_FEATURES}
        long_term = rng.integers(1, n_cat + 1, 3)
        static = []
        for _ in range(static_len[u]):
            cat = int(long_term[rng.integers(3)]) if rng.random() < 0.6 else int(rng.integers(1, n_cat + 1))
            it = pick_item(cat)
            static.append(InteractionItem({"seq_item": it, "seq_cat": int(item_cat[it])}, 0))
        ws = T0 + int(rng.integers(cfg.num_windows)) * cfg.window
        rt_ts = np.sort(rng.choice(np.arange(ws, ws + cfg.window), size=rt_len[u], replace=False))
        rt_items = rng.integers(1, n_items + 1, rt_len[u])
        realtime = [InteractionItem({"seq_item": int(it), "seq_cat": int(item_cat[it])}, int(t))
                    for it, t in zip(rt_items, rt_ts)]
        req = np.sort(rng.choice(np.arange(ws + 1, ws + cfg.window), size=k[u], replace=False))[::-1]
        cands = []
        for t in req:
            if rng.random() < cfg.match_prob and realtime:
                it = pick_item(int(item_cat[rt_items[rng.integers(rt_len[u])]]))
            elif rng.random() < 0.3:
                it = pick_item(int(long_term[rng.integers(3)]))
            else:
                it = int(rng.integers(1, n_items + 1))
            cands.append((it, int(t)))
        raw.append((profile, static, realtime, cands))

    # planted factors per candidate
    # separate stream so enabling taste leaves every other draw unchanged
    taste_table = np.random.default_rng([cfg.seed, 1]).normal(0, 1, (len(PROFILE_FEATURES), cfg.profile_vocab + 1, n_cat + 1))
    aff, seq_now, seq_long, prof, taste, owner = [], [], [], [], [], []
    for u, (profile, static, realtime, cands) in enumerate(raw):
        s_cats = np.array([it.features["seq_cat"] for it in static])
        r_cats = np.array([it.features["seq_cat"] for it in realtime])
        r_ts = np.array([it.ts for it in realtime])
        pe = sum(profile_effect[j, profile[f]] for j, f in enumerate(PROFILE_FEATURES))
        for it, t in cands:
            c = item_cat[it]
            aff.append(float(user_vec[u] @ item_vec[it]))
            seq_now.append(float(np.sum((r_cats == c) & (r_ts < t))))
            seq_long.append(float(np.mean(s_cats == c)) if s_cats.size else 0.0)
            prof.append(pe)
            taste.append(sum(taste_table[j, profile[f], c] for j, f in enumerate(PROFILE_FEATURES)))
            owner.append(u)
    aff = np.array(aff)
    z_cross = _standardize(aff)
    z_seq = _standardize(0.8 * np.sqrt(np.array(seq_now)) + 0.2 * 5.0 * np.array(seq_long))
    z_profile = _standardize(np.array(prof))
    z_taste = _standardize(np.array(taste))
    signal = cfg.w_cross * z_cross + cfg.w_seq * z_seq + cfg.w_profile * z_profile + cfg.w_taste * z_taste
    bias = _solve_bias(signal, cfg.click_rate)
    p_click = _sigmoid(bias + signal)
    buy_bias = _solve_bias(0.5 * signal, cfg.purchase_rate, weights=p_click)
    p_buy = _sigmoid(buy_bias + 0.5 * signal)
    click = (rng.random(p_click.size) < p_click).astype(int)
    purchase = click * (rng.random(p_click.size) < p_buy).astype(int)
    edges = np.quantile(aff, np.linspace(0, 1, cfg.affinity_buckets + 1)[1:-1])
    bucket = 1 + np.searchsorted(edges, aff, side="right")
    pv = rng.integers(1, cfg.pv_vocab + 1, p_click.size)

    samples = []
    j = 0
    for u, (profile, static, realtime, cands) in enumerate(raw):
        cs = []
        for it, t in cands:
            cs.append(Candidate({"item_id": it, "item_cat": int(item_cat[it])},
                                {"affinity": int(bucket[j]), "pv": int(pv[j])},
                                t, int(click[j]), int(purchase[j])))
            j += 1
        samples.append(AggregatedSample(u + 1, profile, static, realtime, cs))

    newer = sum(any(it.ts >= c.request_ts for it in s.realtime_seq for c in s.candidates) for s in samples)
    manifest = {
        "config": asdict(cfg),
        "bayes_auc": expected_auc(p_click),
        "bayes_auc_ctcvr": expected_auc(p_click * p_buy),
        "base_rates": {
            "planted_click": float(p_click.mean()),
            "planted_purchase_given_click": float(np.average(p_buy, weights=p_click)),
            "click": float(click.mean()),
            "purchase_given_click": float(purchase.sum() / max(click.sum(), 1)),
        },
        "counts": {"users": n, "candidates": int(p_click.size), "clicks": int(click.sum()),
                   "purchases": int(purchase.sum()), "samples_with_future_realtime": int(newer)},
        "bias": {"click": bias, "purchase": buy_bias},
    }
    factors = {"z_cross": z_cross, "z_seq": z_seq, "z_profile": z_profile, "z_taste": z_taste, "p_click": p_click,
               "p_purchase": p_buy, "user": np.array(owner) + 1}
    return GeneratedData(samples, manifest, factors)


def write_dataset(data: GeneratedData, out_dir, name: str = "data") -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"data": out / f"{name}.jsonl", "manifest": out / "manifest.json", "planted": out / "planted.npz"}
    dump_jsonl(data.samples, paths["data"])
    paths["manifest"].write_text(json.dumps(data.manifest, indent=2, sort_keys=True))
    np.savez(paths["planted"], **data.factors)
    return paths


def shuffle_cross_features(samples: Sequence[AggregatedSample], seed: int) -> List[AggregatedSample]:
    """Permute each cross feature's ids across all candidates (destroys the cross signal)."""
    rng = np.random.default_rng(seed)
    names = sorted({n for s in samples for c in s.candidates for n in c.cross})
    cands = [c for s in samples for c in s.candidates]
    perm = {n: rng.permutation(len(cands)) for n in names}
    vals = {n: [c.cross.get(n, 0) for c in cands] for n in names}
    new_cross = [{n: vals[n][perm[n][i]] for n in names} for i in range(len(cands))]
    out, j = [], 0
    for s in samples:
        cs = []
        for c in s.candidates:
            cs.append(Candidate(dict(c.features), new_cross[j], c.request_ts, c.click, c.purchase))
            j += 1
        out.append(AggregatedSample(s.user_id, s.profile, s.static_seq, s.realtime_seq, cs))
    return out


def split(samples: Sequence[AggregatedSample], test_fraction: float, seed: int) -> Tuple[list, list]:
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(samples))
    n_test = int(round(len(samples) * test_fraction))
    test = set(idx[:n_test].tolist())
    return ([s for i, s in enumerate(samples) if i not in test], [s for i, s in enumerate(samples) if i in test])
