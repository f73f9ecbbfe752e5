import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtgr.data import DataError
from mtgr.embedding import ShardedEmbeddingStore, merge_tables
from mtgr.encoder import HstuConfig
from mtgr.model import init_model_params
from mtgr.trainer import (
    AdamState,
    GradientContractError,
    TrainConfig,
    TrainingAborted,
    adam_step,
    aggregate_gradients_weighted,
    compute_step,
    default_step_tokens,
    load_checkpoint,
    load_dense,
    plan_dynamic_batches,
    schedule_epoch,
    train,
)
import mtgr.trainer as trainer_mod

MODEL = HstuConfig(n_layer=1, d_model=8, n_heads=2)


class TestPlan:
    def test_uniform(self):
        assert plan_dynamic_batches([10] * 8, 4, 100).bs == [2, 2, 2, 2]

    def test_long_tail_balance(self):
        lengths = [900] + [100] * 27
        plan = plan_dynamic_batches(lengths, 4, 1000)
        assert max(plan.tokens) / min(plan.tokens) <= 1.5
        assert plan.tokens == [900, 900, 900, 900]

    def test_single_worker(self):
        plan = plan_dynamic_batches([5, 9, 3], 1, 100)
        assert plan.assignments == [[0, 1, 2]]

    def test_oversize_sample(self):
        with pytest.raises(DataError):
            plan_dynamic_batches([5, 101], 2, 100)

    def test_deterministic(self):
        lengths = [7, 3, 7, 1, 9, 2]
        assert plan_dynamic_batches(lengths, 3, 20) == plan_dynamic_batches(lengths, 3, 20)

    @settings(max_examples=80)
    @given(st.lists(st.integers(1, 50), min_size=1, max_size=60), st.integers(1, 6), st.integers(50, 200))
    def test_schedule_packs(self, lengths, w, b):
        """Steps cut at the default step size always pack, covering every sample once within budget."""
        step = default_step_tokens(w, b, max(lengths))
        seen = []
        for chunk in schedule_epoch(lengths, step):
            plan = plan_dynamic_batches([lengths[i] for i in chunk], w, b)
            assert all(t <= b for t in plan.tokens)
            assert sorted(j for a in plan.assignments for j in a) == list(range(len(chunk)))
            seen += chunk
        assert seen == list(range(len(lengths)))


class TestAggregate:
    def test_equal_bs_is_mean(self):
        g = [{"w": np.array([1.0, 2.0])}, {"w": np.array([3.0, 6.0])}]
        np.testing.assert_allclose(aggregate_gradients_weighted(g, [4, 4])["w"], [2.0, 4.0])

    def test_single_worker_identity(self):
        g = {"w": np.array([0.3, -1.0])}
        np.testing.assert_array_equal(aggregate_gradients_weighted([g], [7])["w"], g["w"])

    def test_mismatched_keys(self):
        with pytest.raises(GradientContractError):
            aggregate_gradients_weighted([{"a": np.zeros(1)}, {"b": np.zeros(1)}], [1, 1])

    def test_unequal_bs_matches_pooled(self, tiny_data, tiny_schema):
        by_len = sorted(tiny_data.samples, key=lambda s: s.num_tokens(tiny_schema))
        samples = by_len[-1:] + by_len[:15]
        params = init_model_params(tiny_schema, MODEL, 0)
        idx = list(range(len(samples)))
        lengths = [s.num_tokens(tiny_schema) for s in samples]
        plan = merge_tables(tiny_schema)
        multi = compute_step(samples, idx, tiny_schema,
                             TrainConfig(num_workers=4, token_budget=max(max(lengths), sum(lengths) // 3), model=MODEL), params,
                             ShardedEmbeddingStore(plan, 4))
        assert len(set(multi.plan.bs)) > 1
        pooled = compute_step(samples, idx, tiny_schema, TrainConfig(num_workers=1, token_budget=10**6, model=MODEL),
                              params, ShardedEmbeddingStore(plan, 1))
        assert multi.loss == pytest.approx(pooled.loss, abs=1e-12)
        for k in pooled.dense:
            np.testing.assert_allclose(multi.dense[k], pooled.dense[k], rtol=0, atol=1e-9)
        for p, (t, f, g) in pooled.sparse.items():
            mt, mf, mg = multi.sparse[p]
            np.testing.assert_array_equal(mt, t)
            np.testing.assert_array_equal(mf, f)
            np.testing.assert_allclose(mg, g, rtol=0, atol=1e-9)

    def test_threads_match_serial(self, tiny_data, tiny_schema):
        samples = tiny_data.samples[:16]
        params = init_model_params(tiny_schema, MODEL, 0)
        cfg = TrainConfig(num_workers=3, token_budget=400, model=MODEL)
        plan = merge_tables(tiny_schema)
        a = compute_step(samples, range(16), tiny_schema, cfg, params, ShardedEmbeddingStore(plan, 3))
        with ThreadPoolExecutor(3) as pool:
            b = compute_step(samples, range(16), tiny_schema, cfg, params, ShardedEmbeddingStore(plan, 3), pool)
        assert a.loss == b.loss
        for k in a.dense:
            np.testing.assert_array_equal(a.dense[k], b.dense[k])


class TestAdam:
    def test_zero_grad(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), 1e-3)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step(self):
        p = {"w": np.array([0.5])}
        adam_step(p, {"w": np.array([1.0])}, AdamState(), 1e-3)
        assert 0.5 - p["w"][0] == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        grads = [{"w": rng.normal(size=3)} for _ in range(5)]
        out = []
        for _ in range(2):
            p, s = {"w": np.ones(3)}, AdamState()
            for g in grads:
                adam_step(p, g, s, 1e-2)
            out.append(p["w"].tobytes())
        assert out[0] == out[1]


def _cfg(**kw):
    base = dict(learning_rate=3e-3, num_workers=2, token_budget=400, seed=3, max_steps=5, model=MODEL)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_zero_steps_checkpoint_is_init(self, tiny_data, tiny_schema, tmp_path):
        train(tiny_data.samples, tiny_schema, _cfg(max_steps=0), out_dir=tmp_path)
        ck = load_checkpoint(tmp_path / "checkpoint")
        init = init_model_params(tiny_schema, MODEL, 3)
        assert ck.params.keys() == init.keys()
        for k in init:
            np.testing.assert_array_equal(ck.params[k], init[k])
        assert ck.adam.step == 0
        assert (tmp_path / "metrics.jsonl").read_text() == ""

    def test_loss_falls(self, tiny_data, tiny_schema):
        res = train(tiny_data.samples, tiny_schema, _cfg(max_steps=200, learning_rate=1e-2))
        losses = [e["loss"] for e in res.log]
        assert len(losses) == 200
        assert np.mean(losses[-10:]) <= 0.7 * losses[0]

    def test_workers_equivalent(self, tiny_data, tiny_schema):
        step = 600
        runs = [train(tiny_data.samples, tiny_schema, _cfg(num_workers=w, token_budget=step if w == 1 else 250,
                                                             step_tokens=step, max_steps=8))
                for w in (1, 4)]
        for a, b in zip(runs[0].log, runs[1].log):
            assert a["loss"] == pytest.approx(b["loss"], abs=1e-6)
        for k in runs[0].params:
            np.testing.assert_allclose(runs[0].params[k], runs[1].params[k], rtol=0, atol=1e-6)

    def test_epoch_covers_every_sample(self, tiny_data, tiny_schema, monkeypatch):
        seen = []
        real = trainer_mod.compute_step

        def spy(samples, indices, *a, **k):
            seen.extend(indices)
            return real(samples, indices, *a, **k)

        monkeypatch.setattr(trainer_mod, "compute_step", spy)
        n = len(tiny_data.samples)
        lengths = [s.num_tokens(tiny_schema) for s in tiny_data.samples]
        steps = len(schedule_epoch(lengths, default_step_tokens(2, 400, max(lengths))))
        train(tiny_data.samples, tiny_schema, _cfg(max_steps=steps, shuffle=False))
        assert sorted(seen) == list(range(n))

    def test_metric_log_and_checkpoint_layout(self, tiny_data, tiny_schema, tmp_path):
        train(tiny_data.samples[:80], tiny_schema, _cfg(max_steps=4, eval_every=2), out_dir=tmp_path,
              eval_samples=tiny_data.samples[80:])
        lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [l["step"] for l in lines] == [1, 2, 3, 4]
        assert all(set(l) == {"step", "loss", "auc", "gauc"} for l in lines)
        assert lines[0]["auc"] is None and lines[1]["auc"] is not None
        ck = tmp_path / "checkpoint"
        assert {p.name for p in ck.iterdir()} >= {"dense.bin", "sparse", "config.snapshot"}
        arrays, step = load_dense(ck / "dense.bin")
        assert step == 4 and any(k.startswith("adam_m/") for k in arrays)

    def test_nan_aborts_with_diagnostics(self, tiny_data, tiny_schema, tmp_path, monkeypatch):
        real = trainer_mod.compute_step

        def poisoned(*a, **k):
            res = real(*a, **k)
            res.loss = float("nan")
            return res

        monkeypatch.setattr(trainer_mod, "compute_step", poisoned)
        with pytest.raises(TrainingAborted):
            train(tiny_data.samples, tiny_schema, _cfg(max_steps=3), out_dir=tmp_path)
        diag = json.loads((tmp_path / "diagnostic.json").read_text())
        assert diag["step"] == 1 and diag["loss"] == "nan"

    def test_checkpoint_resumes_scores(self, tiny_data, tiny_schema, tmp_path):
        from mtgr.model import score

        res = train(tiny_data.samples, tiny_schema, _cfg(max_steps=3), out_dir=tmp_path)
        ck = load_checkpoint(tmp_path / "checkpoint")
        a = score(tiny_data.samples[:10], tiny_schema, MODEL, res.params, res.store)
        b = score(tiny_data.samples[:10], ck.schema, ck.model, ck.params, ck.store)
        np.testing.assert_array_equal(a, b)

    def test_token_weighting_flag(self, tiny_data, tiny_schema):
        res = train(tiny_data.samples, tiny_schema, _cfg(max_steps=2, loss_weighting="token"))
        assert len(res.log) == 2 and np.isfinite(res.log[-1]["loss"])

    def test_grad_clip(self, tiny_data, tiny_schema):
        res = train(tiny_data.samples, tiny_schema, _cfg(max_steps=2, grad_clip=0.1))
        assert np.isfinite(res.log[-1]["loss"])
