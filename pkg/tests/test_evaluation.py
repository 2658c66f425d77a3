import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mogcsl.envs import generate_denoise_dataset
from mogcsl.evaluation import (
    DenoiseConfig,
    EvalCase,
    MetricsReport,
    emit_report,
    hr_at_k,
    load_report,
    metric_values,
    multiclass_logloss,
    ndcg_at_k,
    rank_items,
    run_denoise_comparison,
    truth_ranks,
    variant_features,
)


def case(action, flags=(True,)):
    return EvalCase((), 1, None, action, tuple(flags))


def test_rank_examples():
    assert rank_items([0.1, 0.7, 0.2]) == [2, 3, 1]
    assert rank_items(np.full(6, 1 / 6)) == [1, 2, 3, 4, 5, 6]
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = rng.dirichlet(np.ones(8))
        assert rank_items(p)[0] == int(np.argmax(p)) + 1


def test_metric_examples():
    ranking = list(range(1, 21))
    assert hr_at_k([case(1)], [ranking], 10, 0) == 1.0
    assert hr_at_k([case(11)], [ranking], 10, 0) == 0.0
    assert ndcg_at_k([case(1)], [ranking], 10, 0) == 1.0
    assert ndcg_at_k([case(3)], [ranking], 3, 0) == pytest.approx(0.5)
    assert ndcg_at_k([case(3)], [ranking], 2, 0) == 0.0


def test_absent_objective_is_none():
    cases = [case(1, (True, False)), case(2, (True, False))]
    rankings = [[1, 2], [2, 1]]
    assert hr_at_k(cases, rankings, 1, 1) is None
    assert ndcg_at_k(cases, rankings, 1, 1) is None
    vals = metric_values(np.array([1, 1]), np.array([[True, False], [True, False]]), ks=(1,))
    assert vals["obj1/HR@1"] == 1.0 and vals["obj2/HR@1"] is None and vals["obj2/count"] == 0
    with pytest.raises(ValueError):
        hr_at_k(cases, rankings[:1], 1, 0)


def test_eval_case_rejects_bad_action():
    with pytest.raises(ValueError):
        case(0)


def test_random_rankings_hr():
    rng = np.random.default_rng(0)
    n, N = 100_000, 100
    probs = rng.random((n, N))
    truth = rng.integers(1, N + 1, size=n)
    ranks = truth_ranks(probs, truth)
    vals = metric_values(ranks, np.ones((n, 1), bool), ks=(10,))
    assert abs(vals["obj1/HR@10"] - 0.10) <= 0.01


def brute_metrics(actions, rankings, k):
    hr, nd = [], []
    for a, r in zip(actions, rankings):
        pos = None
        for i, item in enumerate(r[:k]):
            if item == a:
                pos = i + 1
        hr.append(1.0 if pos else 0.0)
        nd.append(1.0 / math.log2(pos + 1) if pos else 0.0)
    return sum(hr) / len(hr), sum(nd) / len(nd)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 100), st.integers(2, 30))
def test_metrics_match_brute_force(seed, n, N):
    rng = np.random.default_rng(seed)
    # coarse probabilities to exercise ties
    probs = rng.integers(0, 4, size=(n, N)).astype(float) + 1e-3
    probs /= probs.sum(axis=1, keepdims=True)
    truth = rng.integers(1, N + 1, size=n)
    rankings = [rank_items(p) for p in probs]
    cases = [case(int(a)) for a in truth]
    ranks = truth_ranks(probs, truth)
    assert ranks.tolist() == [r.index(int(a)) + 1 for r, a in zip(rankings, truth)]
    prev_hr = prev_nd = 0.0
    for k in range(1, N + 1):
        hr, nd = hr_at_k(cases, rankings, k, 0), ndcg_at_k(cases, rankings, k, 0)
        bh, bn = brute_metrics(truth, rankings, k)
        assert hr == bh and nd == pytest.approx(bn, abs=1e-12)
        vals = metric_values(ranks, np.ones((n, 1), bool), ks=(k,))
        assert vals["obj1/HR@%d" % k] == pytest.approx(hr, abs=1e-12)
        assert vals["obj1/NDCG@%d" % k] == pytest.approx(nd, abs=1e-12)
        assert 0 <= nd <= hr <= 1
        assert hr >= prev_hr and nd >= prev_nd - 1e-15
        prev_hr, prev_nd = hr, nd


def sample_report():
    runs = [
        {"obj1/HR@5": 0.5, "obj1/NDCG@5": 0.25, "obj2/HR@5": None, "obj2/NDCG@5": None, "obj1/count": 10, "obj2/count": 0},
        {"obj1/HR@5": 0.7, "obj1/NDCG@5": 0.123456789012345, "obj2/HR@5": None, "obj2/NDCG@5": None, "obj1/count": 12, "obj2/count": 0},
    ]
    return MetricsReport.from_runs(runs, [0, 1], ["obj1", "obj2"], ks=(5,), meta={"label": "m"})


def test_report_mean_std():
    rep = sample_report()
    assert rep.mean("obj1/HR@5") == pytest.approx(0.6)
    assert rep.std("obj1/HR@5") == pytest.approx(0.1)
    assert rep.mean("obj2/HR@5") is None


def test_report_json_round_trip(tmp_path):
    rep = sample_report()
    emit_report(rep, tmp_path / "r.json")
    back = load_report(tmp_path / "r.json")
    assert back.to_dict() == rep.to_dict()
    assert json.loads((tmp_path / "r.json").read_text())["metrics"]["obj1/NDCG@5"]["values"][1] == 0.123456789012345


def test_report_csv_layout(tmp_path):
    rep = sample_report()
    emit_report(rep, tmp_path / "r.csv")
    rows = list(csv.DictReader(io.StringIO((tmp_path / "r.csv").read_text())))
    assert len(rows) == 2 * 2 * 1  # objectives x metrics x ks
    assert {(r["objective"], r["metric"], r["k"]) for r in rows} == {(o, m, "5") for o in ("obj1", "obj2") for m in ("HR", "NDCG")}
    hr = next(r for r in rows if r["objective"] == "obj1" and r["metric"] == "HR")
    assert float(hr["mean"]) == pytest.approx(0.6, abs=1e-12)
    assert next(r for r in rows if r["objective"] == "obj2")["mean"] == ""


def test_report_markdown(tmp_path):
    rep = sample_report()
    emit_report(rep, tmp_path / "r.md")
    text = (tmp_path / "r.md").read_text()
    assert "60.00±10.00" in text
    assert "n/a" in text
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path / "r.xml")


def test_variant_features():
    ds = generate_denoise_dataset(10, seed=0)
    assert variant_features(ds, "s").shape == (10, 50)
    ug = variant_features(ds, "ug", inference_goal=1.0)
    assert ug.shape == (10, 51) and np.all(ug[:, -1] == 1.0)
    mg = variant_features(ds, "mg")
    assert mg.shape == (10, 55) and np.array_equal(mg[:, 50:], ds.goals)


def test_multiclass_logloss_uniform():
    probs = np.full((4, 51), 1 / 51)
    assert multiclass_logloss(probs, np.array([0, 5, 10, 50])) == pytest.approx(math.log(51))


def test_denoise_deterministic():
    ds = generate_denoise_dataset(2000, seed=0)
    a = run_denoise_comparison(ds, DenoiseConfig(), seeds=[0])
    b = run_denoise_comparison(ds, DenoiseConfig(), seeds=[0])
    assert a.to_csv() == b.to_csv()
    assert not any(a.errors.values())


def test_denoise_noise_free_variants_indistinguishable():
    seeds = [0, 1, 2, 3, 4]
    data = [generate_denoise_dataset(5000, seed=s, threshold=-np.inf) for s in seeds]
    res = run_denoise_comparison(data, DenoiseConfig(), seeds)
    for metric in ("accuracy", "logloss"):
        intervals = {v: res.mean_std(metric, v) for v in ("s", "ug", "mg")}
        lo = max(m - 2 * s for m, s in intervals.values())
        hi = min(m + 2 * s for m, s in intervals.values())
        assert lo <= hi, (metric, intervals)


def test_denoise_table_exports():
    ds = generate_denoise_dataset(1000, seed=1)
    res = run_denoise_comparison([ds, ds], DenoiseConfig(), seeds=[0, 1])
    rows = list(csv.DictReader(io.StringIO(res.to_csv())))
    assert [r["variant"] for r in rows] == ["s", "ug", "mg"]
    assert set(rows[0]) == {"variant", "accuracy", "accuracy_std", "m-logloss", "m-logloss_std"}
    assert res.to_markdown().count("±") == 6
    with pytest.raises(ValueError):
        run_denoise_comparison([ds], DenoiseConfig(), seeds=[0, 1])
