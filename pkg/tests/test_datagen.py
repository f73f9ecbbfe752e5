import json
from pathlib import Path

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from factories import tiny_gen_config
from mtgr.data import load_jsonl, sample_to_json
from mtgr.datagen import (
    GenConfig,
    default_schema,
    expected_auc,
    generate,
    shuffle_cross_features,
    split,
    truncated_pareto,
    write_dataset,
)
from mtgr.metrics import auc


@pytest.fixture(scope="module")
def big():
    return generate(GenConfig(num_users=10_000))


def test_same_seed_identical_files(tmp_path):
    cfg = tiny_gen_config(num_users=50)
    a = write_dataset(generate(cfg), tmp_path / "a")
    b = write_dataset(generate(cfg), tmp_path / "b")
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes(), k


def test_other_seed_differs():
    a = generate(tiny_gen_config(num_users=30, seed=1))
    b = generate(tiny_gen_config(num_users=30, seed=2))
    assert a.samples != b.samples


def test_null_cross_signal_shuffle_invariant():
    data = generate(tiny_gen_config(num_users=200, w_cross=0.0))
    f = data.factors
    b = data.manifest["bias"]["click"]
    cfg = data.manifest["config"]
    expect = 1 / (1 + np.exp(-(b + cfg["w_seq"] * f["z_seq"] + cfg["w_profile"] * f["z_profile"])))
    np.testing.assert_allclose(f["p_click"], expect, rtol=1e-12)
    shuffled = shuffle_cross_features(data.samples, seed=5)
    ids = lambda ss: [c.cross["affinity"] for s in ss for c in s.candidates]
    assert ids(shuffled) != ids(data.samples)
    assert sorted(ids(shuffled)) == sorted(ids(data.samples))
    # everything except cross ids is untouched
    for s, t in zip(data.samples, shuffled):
        assert s.static_seq == t.static_seq and s.realtime_seq == t.realtime_seq
        assert [c.features for c in s.candidates] == [c.features for c in t.candidates]
        assert [c.click for c in s.candidates] == [c.click for c in t.candidates]


def test_logistic_oracle_recovers_bayes_auc(big):
    f = big.factors
    x = np.column_stack([f["z_cross"], f["z_seq"], f["z_profile"]])
    y = np.array([c.click for s in big.samples for c in s.candidates])
    fit = LogisticRegression().fit(x, y)
    got = auc(fit.decision_function(x), y)
    assert abs(got - big.manifest["bayes_auc"]) <= 0.02


def test_default_base_rates(big):
    rates = big.manifest["base_rates"]
    assert rates["planted_click"] == pytest.approx(0.045, abs=1e-6)
    assert rates["planted_purchase_given_click"] == pytest.approx(0.17, abs=1e-6)
    assert rates["click"] == pytest.approx(0.045, abs=0.005)
    assert rates["purchase_given_click"] == pytest.approx(0.17, abs=0.03)


def test_future_realtime_present(big):
    assert big.manifest["counts"]["samples_with_future_realtime"] >= big.manifest["counts"]["users"] // 1000


def test_probabilities_and_labels(big):
    for k in ("p_click", "p_purchase"):
        p = big.factors[k]
        assert np.all((p > 0) & (p < 1))
    for s in big.samples:
        for c in s.candidates:
            assert c.purchase <= c.click


def test_long_tail_lengths(big):
    lengths = np.array([len(s.static_seq) for s in big.samples])
    assert lengths.max() <= 1000
    assert np.median(lengths) < lengths.mean()
    assert max(len(s.realtime_seq) for s in big.samples) <= 100


def test_cross_id_is_affinity_bucket(big):
    """Higher affinity buckets carry higher planted click rates."""
    bucket = np.array([c.cross["affinity"] for s in big.samples for c in s.candidates])
    z = big.factors["z_cross"]
    means = [z[bucket == b].mean() for b in np.unique(bucket)]
    assert np.all(np.diff(means) > 0)


def test_samples_validate_against_json_schema(tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    schema = json.loads((Path(__file__).parents[1] / "docs" / "dataset.schema.json").read_text())
    data = generate(tiny_gen_config(num_users=150))
    paths = write_dataset(data, tmp_path)
    for line in paths["data"].read_text().splitlines():
        jsonschema.validate(json.loads(line), schema)
    assert load_jsonl(paths["data"]) == data.samples
    for s in data.samples:
        s.validate()


def test_schema_covers_generated_features():
    cfg = tiny_gen_config(num_users=40)
    data = generate(cfg)
    schema = default_schema(8, cfg)
    for s in data.samples:
        obj = sample_to_json(s)
        assert set(obj["profile"]) == set(schema.profile)
        for c in obj["candidates"]:
            assert set(c["features"]) == set(schema.candidate) and set(c["cross"]) == set(schema.cross)


def test_split_partitions():
    data = generate(tiny_gen_config(num_users=100))
    train, test = split(data.samples, 0.2, seed=0)
    assert len(test) == 20 and len(train) == 80
    assert sorted(s.user_id for s in train + test) == sorted(s.user_id for s in data.samples)


@pytest.mark.parametrize("lo,hi", [(1, 5), (10, 1000), (3, 3)])
def test_truncated_pareto_bounds(lo, hi):
    x = truncated_pareto(np.random.default_rng(0), 2000, 1.2, lo, hi)
    assert x.min() >= lo and x.max() <= hi


def test_expected_auc_matches_sampling():
    rng = np.random.default_rng(3)
    p = 1 / (1 + np.exp(-rng.normal(-2, 1.5, 4000)))
    draws = [auc(p, (rng.random(p.size) < p).astype(int)) for _ in range(30)]
    assert np.mean(draws) == pytest.approx(expected_auc(p), abs=0.005)
