import json
from dataclasses import replace
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bivrec.dataio import InteractionDataset, UserSequence, eval_instances
from bivrec.diagnostics import toy_config
from bivrec.evaluator import (
    MetricsReport,
    evaluate,
    hr_at_k,
    ndcg_at_k,
    recall_at_k,
    retrieve_topk,
    score_user,
    user_interests,
)
from bivrec.model import BivRecModel
from bivrec.rng import Rng


def brute_force_topk(interests, items, k, exclude=()):
    """Score every real item by its best interest, sort by (-score, index)."""
    n = items.shape[0] - 1
    scored = []
    for j in range(1, n + 1):
        if j in exclude:
            continue
        s = max(float(np.dot(v, items[j])) for v in np.atleast_2d(interests))
        scored.append((-s, j))
    scored.sort()
    return [j for _, j in scored[:min(k, n)]]


def brute_metrics(ranked, truth, k):
    hits = [r for r, x in enumerate(ranked[:k], 1) if x in truth]
    dcg = sum(1 / math.log2(r + 1) for r in hits)
    idcg = sum(1 / math.log2(r + 1) for r in range(1, min(k, len(truth)) + 1))
    return len(hits) / len(truth), dcg / idcg, float(bool(hits))


@pytest.mark.parametrize("seed", range(20))
def test_retrieval_and_metrics_match_brute_force(seed):
    rng = Rng(seed)
    n = int(rng.integers(5, 501))
    k_int, d = int(rng.integers(1, 6)), int(rng.integers(2, 9))
    items = rng.normal((n + 1, d))
    # coarse values force ties so the index rule is exercised
    if seed % 2:
        items = np.round(items)
    for u in range(5):
        v = rng.child("u", u).normal((k_int, d))
        k = int(rng.child("k", u).integers(1, n + 5))
        truth = set(int(x) for x in rng.child("t", u).integers(1, n + 1, 4))
        ranked = retrieve_topk(v, items, k)
        assert ranked == brute_force_topk(v, items, k)
        kk = min(k, n)
        r, g, h = brute_metrics(ranked, truth, kk)
        res = score_user("u", ranked, truth, kk)
        assert (res.recall, res.hr) == (r, h)
        assert res.ndcg == pytest.approx(g, abs=1e-15)


def test_single_interest_is_inner_product_topk():
    rng = Rng(1)
    items = rng.normal((31, 4))
    v = rng.normal(4)
    expect = np.argsort(-(items[1:] @ v), kind="stable")[:7] + 1
    assert retrieve_topk(v, items, 7) == expect.tolist()


def test_orthogonal_interests_interleave():
    items = np.zeros((11, 2))
    items[1:6, 0] = [9, 7, 5, 3, 1]
    items[6:11, 1] = [8, 6, 4, 2, 0.5]
    ranked = retrieve_topk(np.eye(2), items, 6)
    assert ranked == [1, 6, 2, 7, 3, 8]
    assert ranked == brute_force_topk(np.eye(2), items, 6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 60), st.integers(1, 4), st.integers(0, 10_000))
def test_no_duplicates_and_length(n, k, kint, seed):
    rng = Rng(seed)
    ranked = retrieve_topk(rng.normal((kint, 3)), rng.normal((n + 1, 3)), k)
    assert len(ranked) == len(set(ranked)) == min(k, n)
    assert 0 not in ranked


def test_padding_row_never_returned():
    items = np.zeros((4, 2))
    items[0] = 100.0
    assert 0 not in retrieve_topk(np.ones(2), items, 3)


def test_exclusion_drops_items():
    items = Rng(2).normal((9, 3))
    v = Rng(3).normal((2, 3))
    ranked = retrieve_topk(v, items, 8, exclude={2, 5})
    assert ranked == brute_force_topk(v, items, 8, {2, 5})
    assert len(ranked) == 6


def test_bad_inputs():
    with pytest.raises(ValueError):
        retrieve_topk(np.zeros((0, 3)), np.zeros((4, 3)), 2)
    with pytest.raises(ValueError):
        retrieve_topk(np.ones(3), np.zeros((4, 3)), 0)


def test_recall_cases():
    assert recall_at_k([1, 3], {1, 2}) == 0.5
    assert recall_at_k([2, 1, 9], {1, 2}) == 1.0
    assert recall_at_k([7, 8], {1, 2}) == 0.0
    with pytest.raises(ValueError):
        recall_at_k([1], set())


def test_ndcg_cases():
    assert ndcg_at_k([5, 1, 2], {5}) == 1.0
    assert abs(ndcg_at_k([1, 5, 2], {5}) - 1 / math.log2(3)) <= 1e-12
    assert ndcg_at_k([1, 2], {5}) == 0.0
    # IDCG is bounded by the cutoff
    assert ndcg_at_k([1, 2], {1, 2, 3}, k=2) == 1.0


def test_hr_cases():
    assert hr_at_k([1, 2], {2}) == 1.0
    assert hr_at_k([1, 2], {3}) == 0.0
    assert hr_at_k([1, 2, 3], {1, 2, 3}) == 1.0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=20, unique=True),
       st.sets(st.integers(1, 30), min_size=1, max_size=10))
def test_metric_relations(ranked, truth):
    k = len(ranked)
    r, g, h = recall_at_k(ranked, truth), ndcg_at_k(ranked, truth, k), hr_at_k(ranked, truth)
    assert 0.0 <= r <= h <= 1.0
    assert 0.0 <= g <= 1.0 + 1e-12
    assert (g == 0) == (r == 0)


def dataset(seqs, num_items):
    users = [UserSequence(f"u{i}", tuple(s)) for i, s in enumerate(seqs)]
    return InteractionDataset(users, {f"i{j}": j for j in range(1, num_items + 1)}, num_items)


def toy_eval_setup(seed=0, users=20, items=30):
    cfg = toy_config(k_eval=5)
    rng = Rng(seed).child("corpus")
    seqs = [rng.child("u", u).integers(1, items + 1, int(rng.child("n", u).integers(5, 14))).tolist()
            for u in range(users)]
    feats = Rng(seed).normal((items + 1, 4))
    feats[0] = 0
    return cfg, BivRecModel(cfg, items, 4, Rng(seed)), dataset(seqs, items), feats


@pytest.mark.parametrize("view", ["id", "mm"])
def test_evaluate_matches_brute_force_reranker(view):
    cfg, model, ds, feats = toy_eval_setup()
    report = evaluate(model, ds, feats, view, 5)
    interests, items, inst = user_interests(model, ds, feats, view)
    recalls, ndcgs, hrs = [], [], []
    for i, x in enumerate(inst):
        ranked = brute_force_topk(interests[i], items, 5)
        r, g, h = brute_metrics(ranked, x.truth, 5)
        recalls.append(r), ndcgs.append(g), hrs.append(h)
        assert report.per_user[i].ranks == [p for p, j in enumerate(ranked, 1) if j in x.truth]
    assert report.recall == pytest.approx(np.mean(recalls), abs=1e-15)
    assert report.ndcg == pytest.approx(np.mean(ndcgs), abs=1e-15)
    assert report.hr == pytest.approx(np.mean(hrs), abs=1e-15)
    assert report.num_users == 20 and report.k == 5


def test_evaluate_is_deterministic_and_thread_independent():
    _, model, ds, feats = toy_eval_setup(1)
    a = evaluate(model, ds, feats, "id", 5, workers=1)
    b = evaluate(model, ds, feats, "id", 5, workers=4)
    assert a.summary() == b.summary()
    assert [r.ranks for r in a.per_user] == [r.ranks for r in b.per_user]


def test_saturation_oracle():
    """Item vectors that coincide with one-hot interests retrieve every truth item first."""
    k_interests = 3
    interests = np.eye(k_interests) * 10
    items = np.zeros((7, k_interests))
    items[1:4] = np.eye(k_interests)
    truth = {1, 2, 3}
    ranked = retrieve_topk(interests, items, 3)
    res = score_user("u", ranked, truth, 3)
    assert (res.recall, res.ndcg, res.hr) == (1.0, 1.0, 1.0)


def test_relabeling_items_leaves_metrics_unchanged():
    rng = Rng(4)
    n = 40
    items = rng.normal((n + 1, 3))
    v = rng.normal((2, 3))
    truth = {3, 7, 11}
    perm = np.concatenate([[0], rng.permutation(n) + 1])  # new index of old item j is perm[j]
    relabeled = np.zeros_like(items)
    relabeled[perm] = items
    a = score_user("u", retrieve_topk(v, items, 10), truth, 10)
    b = score_user("u", retrieve_topk(v, relabeled, 10), {int(perm[t]) for t in truth}, 10)
    assert (a.recall, a.ndcg, a.hr) == (b.recall, b.ndcg, b.hr)


def test_missing_view_errors():
    cfg = toy_config(view_mode="pure_id")
    model = BivRecModel(cfg, 10, 4, Rng(0))
    ds = dataset([[1, 2, 3, 4, 5]], 10)
    with pytest.raises(ValueError):
        evaluate(model, ds, None, "mm", 5)


def test_report_files(tmp_path):
    _, model, ds, feats = toy_eval_setup(2)
    report = evaluate(model, ds, feats, "mm", 5)
    path = report.write(tmp_path)
    data = json.loads(path.read_text())
    assert data["recall@5"] == report.recall and data["view"] == "mm"
    lines = (tmp_path / "per_user.csv").read_text().splitlines()
    assert lines[0] == "user,hits,truth_size,ranks,recall,ndcg,hr"
    assert len(lines) == 21
    again = evaluate(model, ds, feats, "mm", 5)
    again.write(tmp_path / "b")
    assert (tmp_path / "b" / "report.json").read_bytes() == path.read_bytes()
    assert isinstance(report, MetricsReport)


def test_cold_history_limit_changes_only_history():
    _, model, ds, feats = toy_eval_setup(3)
    cold = replace(ds, history_limit=1)
    full_inst, cold_inst = eval_instances(ds, 8), eval_instances(cold, 8)
    for a, b in zip(full_inst, cold_inst):
        assert a.truth == b.truth
        assert b.mask.sum() == 1
    evaluate(model, cold, feats, "id", 5)
