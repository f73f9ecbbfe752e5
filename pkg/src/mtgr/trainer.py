"""Simulated data-parallel training with dynamic batch sizes.

Each step packs a run of samples onto ``W`` workers under a per-worker token
budget (longest-first greedy). Every worker returns the mean gradient over its
own samples; gradients are recombined weighted by each worker's sample count,
which reproduces the pooled-batch gradient exactly.
"""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import AggregatedSample, DataError, FeatureSchema
from .embedding import MergePlan, ShardedEmbeddingStore, merge_tables
from .encoder import HstuConfig, to_tensors
from .metrics import auc, gauc, safe_metric
from .model import Batch, batch_loss, forward, init_model_params, lookup_batch, prepare_batch, score
from .tensor import Tensor

logger = logging.getLogger(__name__)

DENSE_MAGIC = b"MTGRDNS\x00"
DENSE_VERSION = 1


class PlanError(ValueError):
    pass


class GradientContractError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    sparse_learning_rate: Optional[float] = None  # embedding rows; defaults to learning_rate
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    num_workers: int = 1
    token_budget: int = 4096
    step_tokens: Optional[int] = None
    num_shards: Optional[int] = None
    seed: int = 0
    max_steps: int = 100
    eval_every: int = 0
    shuffle: bool = True
    threads: bool = False
    grad_clip: Optional[float] = None
    loss_weighting: str = "sample"  # or "token"
    model: HstuConfig = field(default_factory=lambda: HstuConfig(n_layer=2, d_model=32, n_heads=2))

    def __post_init__(self):
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if self.loss_weighting not in ("sample", "token"):
            raise ValueError(f"unknown loss_weighting {self.loss_weighting!r}")


# ----------------------------------------------------------------------------
# batch planning
# ----------------------------------------------------------------------------


@dataclass
class BatchPlan:
    assignments: List[List[int]]
    tokens: List[int]

    @property
    def bs(self) -> List[int]:
        return [len(a) for a in self.assignments]


def plan_dynamic_batches(lengths: Sequence[int], num_workers: int, budget: int) -> BatchPlan:
    """Assign samples longest-first to the worker with the most budget left.

    Ties go to the lower worker index; each worker's list is returned in input order.
    """
    lengths = [int(x) for x in lengths]
    for i, n in enumerate(lengths):
        if n > budget:
            raise DataError(f"sample {i} has {n} tokens, over the per-worker budget {budget}")
    remaining = [budget] * num_workers
    assign: List[List[int]] = [[] for _ in range(num_workers)]
    for i in sorted(range(len(lengths)), key=lambda j: (-lengths[j], j)):
        w = max(range(num_workers), key=lambda j: (remaining[j], -j))
        if remaining[w] < lengths[i]:
            raise PlanError(f"cannot place sample {i} ({lengths[i]} tokens): step over capacity")
        remaining[w] -= lengths[i]
        assign[w].append(i)
    assign = [sorted(a) for a in assign]
    return BatchPlan(assign, [budget - r for r in remaining])


def default_step_tokens(num_workers: int, budget: int, max_len: int) -> int:
    """Largest step total for which longest-first greedy packing cannot fail."""
    return num_workers * budget - (num_workers - 1) * max_len


def schedule_epoch(lengths: Sequence[int], step_tokens: int) -> List[List[int]]:
    """Cut the sample stream into consecutive steps of at most ``step_tokens`` tokens."""
    steps, cur, used = [], [], 0
    for i, n in enumerate(lengths):
        if n > step_tokens:
            raise DataError(f"sample {i} has {n} tokens, over the step budget {step_tokens}")
        if used + n > step_tokens and cur:
            steps.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += n
    if cur:
        steps.append(cur)
    return steps


# ----------------------------------------------------------------------------
# gradient aggregation and Adam
# ----------------------------------------------------------------------------


def aggregate_gradients_weighted(grads: Sequence[Mapping[str, np.ndarray]], bs: Sequence[float]) -> Dict[str, np.ndarray]:
    """sum_w bs_w * g_w / sum_w bs_w, for per-worker mean gradients ``g_w``."""
    if len(grads) != len(bs) or not grads:
        raise GradientContractError("one batch size per worker gradient set required")
    keys = set(grads[0])
    for g in grads[1:]:
        if set(g) != keys:
            raise GradientContractError("workers report different parameter sets")
    total = float(sum(bs))
    out = {}
    for k in grads[0]:
        acc = np.zeros_like(grads[0][k])
        for g, n in zip(grads, bs):
            if n:
                acc += (n / total) * g[k]
        out[k] = acc
    return out


SparseGrad = Tuple[np.ndarray, np.ndarray, np.ndarray]  # table_ids, feature_ids, rows


def aggregate_sparse_weighted(grads: Sequence[Mapping[str, SparseGrad]], bs: Sequence[float]) -> Dict[str, SparseGrad]:
    """Same weighting for row-sparse gradients; rows of equal keys are summed."""
    from .embedding import unique_keys

    total = float(sum(bs))
    out = {}
    tables = sorted({p for g in grads for p in g})
    for p in tables:
        ts, fs, rows = [], [], []
        for g, n in zip(grads, bs):
            if p in g and n:
                t, f, r = g[p]
                ts.append(t)
                fs.append(f)
                rows.append((n / total) * r)
        if not ts:
            continue
        t, f, r = np.concatenate(ts), np.concatenate(fs), np.concatenate(rows)
        ut, uf, inv = unique_keys(t, f)
        acc = np.zeros((ut.size, r.shape[1]))
        np.add.at(acc, inv, r)
        out[p] = (ut, uf, acc)
    return out


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    for k, g in grads.items():
        m = state.m.setdefault(k, np.zeros_like(params[k]))
        v = state.v.setdefault(k, np.zeros_like(params[k]))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        params[k] -= lr * mhat / (np.sqrt(vhat) + eps)


def clip_gradients(dense: Dict[str, np.ndarray], sparse: Dict[str, SparseGrad], max_norm: float) -> float:
    sq = sum(float((g * g).sum()) for g in dense.values()) + sum(float((r * r).sum()) for _, _, r in sparse.values())
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        s = max_norm / norm
        for k in dense:
            dense[k] = dense[k] * s
        for k, (t, f, r) in list(sparse.items()):
            sparse[k] = (t, f, r * s)
    return norm


# ----------------------------------------------------------------------------
# one step
# ----------------------------------------------------------------------------


@dataclass
class WorkerResult:
    loss: float
    dense: Dict[str, np.ndarray]
    sparse: Dict[str, SparseGrad]
    bs: int
    tokens: int


def worker_gradients(batch: Batch, lookups, schema: FeatureSchema, cfg: HstuConfig,
                     params: Mapping[str, np.ndarray], token_weighting: bool = False) -> WorkerResult:
    """Mean-over-samples loss and gradients for one worker's batch."""
    tp = to_tensors(params)
    emb = {p: Tensor(l.unique_vectors.copy(), requires_grad=True) for p, l in lookups.items()}
    logits = forward(batch, schema, cfg, emb, lookups, tp)
    if token_weighting:
        k = np.bincount(batch.cand_sample, minlength=batch.size)
        w = (batch.lengths / batch.lengths.sum())[batch.cand_sample] / k[batch.cand_sample]
        batch = Batch(**{**batch.__dict__, "weights": w})
    loss = batch_loss(logits, batch)
    leaves = list(tp.values()) + list(emb.values())
    g = T.grad(loss, leaves)
    dense = {k: g[t] for k, t in tp.items()}
    sparse = {p: (l.table_ids, l.feature_ids, g[emb[p]]) for p, l in lookups.items()}
    return WorkerResult(loss.item(), dense, sparse, batch.size, int(batch.lengths.sum()))


@dataclass
class StepResult:
    loss: float
    dense: Dict[str, np.ndarray]
    sparse: Dict[str, SparseGrad]
    plan: BatchPlan
    worker_losses: List[float]


def compute_step(samples: Sequence[AggregatedSample], indices: Sequence[int], schema: FeatureSchema,
                 cfg: TrainConfig, params: Mapping[str, np.ndarray], store: ShardedEmbeddingStore,
                 pool: Optional[ThreadPoolExecutor] = None) -> StepResult:
    """Plan, look up, run every worker and aggregate; does not update parameters."""
    lengths = [samples[i].num_tokens(schema) for i in indices]
    plan = plan_dynamic_batches(lengths, cfg.num_workers, cfg.token_budget)
    active = [[indices[j] for j in a] for a in plan.assignments if a]
    batches = [prepare_batch([samples[i] for i in a], schema, store.plan, cfg.model.mask_mode) for a in active]
    lookups = lookup_batch(store, batches)
    token_w = cfg.loss_weighting == "token"

    def run(w):
        return worker_gradients(batches[w], lookups[w], schema, cfg.model, params, token_w)

    if pool is not None:
        results = list(pool.map(run, range(len(batches))))
    else:
        results = [run(w) for w in range(len(batches))]
    weights = [r.tokens if token_w else r.bs for r in results]
    dense = aggregate_gradients_weighted([r.dense for r in results], weights)
    sparse = aggregate_sparse_weighted([r.sparse for r in results], weights)
    total = float(sum(weights))
    loss = sum(w / total * r.loss for w, r in zip(weights, results))
    return StepResult(loss, dense, sparse, plan, [r.loss for r in results])


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def save_dense(path, arrays: Mapping[str, np.ndarray], step: int) -> None:
    """Magic, version, header length, JSON header, then raw little-endian float64 arrays."""
    entries, offset = [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    header = json.dumps({"step": step, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DENSE_MAGIC)
        fh.write(struct.pack("<II", DENSE_VERSION, len(header)))
        fh.write(header)
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_dense(path) -> Tuple[Dict[str, np.ndarray], int]:
    raw = Path(path).read_bytes()
    if raw[:8] != DENSE_MAGIC:
        raise ValueError(f"{path}: not a dense checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != DENSE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16:16 + hlen])
    body = raw[16 + hlen:]
    out = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    return out, int(header["step"])


def config_snapshot(cfg: TrainConfig) -> str:
    """Flat ``key = value`` text of every training and model setting."""
    flat = {k: v for k, v in asdict(cfg).items() if k != "model"}
    flat.update({f"model.{k}": v for k, v in asdict(cfg.model).items()})
    lines = []
    for k in sorted(flat):
        v = flat[k]
        if v is None:
            continue
        lines.append(f"{_toml_key(k)} = {json.dumps(v) if not isinstance(v, bool) else str(v).lower()}")
    return "\n".join(lines) + "\n"


def _toml_key(k: str) -> str:
    return f'"{k}"' if "." in k else k


def save_checkpoint(directory, params, adam: AdamState, store: ShardedEmbeddingStore,
                    cfg: TrainConfig, schema: FeatureSchema) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays.update({f"adam_m/{k}": v for k, v in adam.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in adam.v.items()})
    save_dense(directory / "dense.bin", arrays, adam.step)
    store.save(directory / "sparse")
    (directory / "config.snapshot").write_text(config_snapshot(cfg))
    (directory / "schema.json").write_text(json.dumps(schema.to_json(), indent=2, sort_keys=True))


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    adam: AdamState
    store: ShardedEmbeddingStore
    schema: FeatureSchema
    model: HstuConfig


def load_checkpoint(directory) -> Checkpoint:
    from .config import parse_flat_toml

    directory = Path(directory)
    arrays, step = load_dense(directory / "dense.bin")
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    adam = AdamState(step,
                     {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                     {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")})
    schema = FeatureSchema.from_json(json.loads((directory / "schema.json").read_text()))
    snap = parse_flat_toml((directory / "config.snapshot").read_text())
    model_kw = {k[6:]: v for k, v in snap.items() if k.startswith("model.")}
    model = HstuConfig(**model_kw)
    meta = json.loads((directory / "sparse" / "store.json").read_text())
    store = ShardedEmbeddingStore(merge_tables(schema), meta["num_shards"], seed=meta["seed"])
    store.load_tables(directory / "sparse")
    return Checkpoint(params, adam, store, schema, model)


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------


def evaluate(samples: Sequence[AggregatedSample], schema: FeatureSchema, model: HstuConfig,
             params: Mapping[str, np.ndarray], store: ShardedEmbeddingStore) -> Dict[str, Optional[float]]:
    """CTR and CTCVR AUC/GAUC over all candidates of ``samples``."""
    logits = score(samples, schema, model, params, store)
    users = np.concatenate([[s.user_id] * len(s.candidates) for s in samples])
    click = np.array([c.click for s in samples for c in s.candidates])
    conv = np.array([c.click * c.purchase for s in samples for c in s.candidates])
    return {
        "auc": safe_metric(auc, logits[:, 0], click),
        "gauc": safe_metric(gauc, users, logits[:, 0], click),
        "ctcvr_auc": safe_metric(auc, logits[:, 1], conv),
        "ctcvr_gauc": safe_metric(gauc, users, logits[:, 1], conv),
        "num_candidates": int(click.size),
    }


@dataclass
class TrainResult:
    params: Dict[str, np.ndarray]
    adam: AdamState
    store: ShardedEmbeddingStore
    log: List[dict]


def _dump_diagnostics(out_dir, step: int, res: StepResult, params) -> Path:
    path = Path(out_dir) / "diagnostic.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    info = {
        "step": step,
        "loss": repr(res.loss),
        "worker_losses": [repr(x) for x in res.worker_losses],
        "plan": res.plan.assignments,
        "param_norms": {k: float(np.linalg.norm(v)) for k, v in params.items()},
        "grad_norms": {k: float(np.linalg.norm(v)) for k, v in res.dense.items()},
    }
    path.write_text(json.dumps(info, indent=2))
    return path


def train(samples: Sequence[AggregatedSample], schema: FeatureSchema, cfg: TrainConfig,
          out_dir=None, eval_samples: Optional[Sequence[AggregatedSample]] = None) -> TrainResult:
    """Run ``cfg.max_steps`` optimizer steps; writes metrics.jsonl and checkpoint/ under ``out_dir``."""
    if not samples:
        raise DataError("empty training set")
    model = cfg.model
    params = init_model_params(schema, model, cfg.seed)
    store = ShardedEmbeddingStore(merge_tables(schema), cfg.num_shards or cfg.num_workers, seed=cfg.seed)
    adam = AdamState()
    lengths = np.array([s.num_tokens(schema) for s in samples])
    step_tokens = cfg.step_tokens or default_step_tokens(cfg.num_workers, cfg.token_budget, int(lengths.max()))
    rng = np.random.default_rng(cfg.seed)
    log: List[dict] = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")
    pool = ThreadPoolExecutor(cfg.num_workers) if cfg.threads and cfg.num_workers > 1 else None
    sparse_lr = cfg.learning_rate if cfg.sparse_learning_rate is None else cfg.sparse_learning_rate
    try:
        step = 0
        while step < cfg.max_steps:
            order = rng.permutation(len(samples)) if cfg.shuffle else np.arange(len(samples))
            for chunk in schedule_epoch(lengths[order], step_tokens):
                if step >= cfg.max_steps:
                    break
                step += 1
                indices = [int(order[i]) for i in chunk]
                store.begin_step()
                res = compute_step(samples, indices, schema, cfg, params, store, pool)
                if not np.isfinite(res.loss):
                    path = _dump_diagnostics(out_dir or ".", step, res, params)
                    raise TrainingAborted(f"non-finite loss at step {step}; diagnostics in {path}")
                if cfg.grad_clip:
                    clip_gradients(res.dense, res.sparse, cfg.grad_clip)
                adam_step(params, res.dense, adam, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
                for phys, (t, f, g) in res.sparse.items():
                    store.adam_update(phys, t, f, g, sparse_lr, cfg.beta1, cfg.beta2, cfg.adam_eps, adam.step)
                store.end_step()
                entry = {"step": step, "loss": res.loss, "auc": None, "gauc": None}
                if eval_samples and cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.max_steps):
                    m = evaluate(eval_samples, schema, model, params, store)
                    entry["auc"], entry["gauc"] = m["auc"], m["gauc"]
                log.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
                    log_fh.flush()
                logger.debug("step %d loss %.6f", step, res.loss)
    finally:
        if pool is not None:
            pool.shutdown()
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint", params, adam, store, cfg, schema)
    return TrainResult(params, adam, store, log)
