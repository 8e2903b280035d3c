"""Multi-interest top-k retrieval and Recall/NDCG/HR@k."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import InteractionDataset, eval_instances
from .model import BivRecModel


def retrieve_topk(interests: np.ndarray, item_matrix: np.ndarray, k: int,
                  exclude=None) -> list[int]:
    """Union of each interest's top-k items, ranked by best score over interests.

    ``item_matrix`` row 0 is padding and never returned. Ties go to the
    lower item index.
    """
    v = np.atleast_2d(np.asarray(interests, dtype=np.float64))
    if v.shape[0] == 0:
        raise ValueError("no interest vectors")
    n = item_matrix.shape[0] - 1
    if not 1 <= k:
        raise ValueError("k must be positive")
    k = min(k, n)
    scores = v @ item_matrix[1:].T  # (K, n); column j is item j + 1
    if exclude:
        cols = np.fromiter((i - 1 for i in exclude if 1 <= i <= n), dtype=np.int64)
        scores[:, cols] = -np.inf
    per_interest = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    pool = np.unique(per_interest)
    best = scores[:, pool].max(axis=0)
    order = np.lexsort((pool, -best))
    ranked = pool[order][:k]
    ranked = ranked[np.isfinite(best[order][:k])]
    return [int(j) + 1 for j in ranked]


def recall_at_k(ranked, truth) -> float:
    truth = set(truth)
    if not truth:
        raise ValueError("empty truth set")
    return len(truth.intersection(ranked)) / len(truth)


def ndcg_at_k(ranked, truth, k: int | None = None) -> float:
    truth = set(truth)
    if not truth:
        raise ValueError("empty truth set")
    k = len(ranked) if k is None else k
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(ranked[:k]) if item in truth)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(truth))))
    return dcg / idcg if idcg > 0 else 0.0


def hr_at_k(ranked, truth) -> float:
    return 1.0 if set(truth).intersection(ranked) else 0.0


@dataclass
class UserResult:
    user: str
    hits: int
    truth_size: int
    ranks: list[int]  # 1-based ranks of the hits
    recall: float
    ndcg: float
    hr: float


@dataclass
class MetricsReport:
    recall: float
    ndcg: float
    hr: float
    k: int
    view: str
    num_users: int
    per_user: list[UserResult] = field(default_factory=list)

    def summary(self) -> dict:
        return {"view": self.view, "k": self.k, "num_users": self.num_users,
                f"recall@{self.k}": self.recall, f"ndcg@{self.k}": self.ndcg, f"hr@{self.k}": self.hr}

    def write(self, out_dir: str | Path, per_user: bool = True) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.json"
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if per_user:
            with open(out / "per_user.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["user", "hits", "truth_size", "ranks", "recall", "ndcg", "hr"])
                for r in self.per_user:
                    w.writerow([r.user, r.hits, r.truth_size, " ".join(map(str, r.ranks)),
                                repr(r.recall), repr(r.ndcg), repr(r.hr)])
        return path

    def as_dict(self) -> dict:
        return asdict(self)


def score_user(user: str, ranked: list[int], truth, k: int) -> UserResult:
    ranks = [r + 1 for r, item in enumerate(ranked) if item in truth]
    return UserResult(user, len(ranks), len(truth), ranks, recall_at_k(ranked, truth),
                      ndcg_at_k(ranked, truth, k), hr_at_k(ranked, truth))


def aggregate(results: list[UserResult], k: int, view: str) -> MetricsReport:
    if not results:
        raise ValueError("no evaluation users")
    n = len(results)
    return MetricsReport(
        recall=sum(r.recall for r in results) / n,
        ndcg=sum(r.ndcg for r in results) / n,
        hr=sum(r.hr for r in results) / n,
        k=k, view=view, num_users=n, per_user=results,
    )


def user_interests(model: BivRecModel, ds: InteractionDataset, features: np.ndarray | None,
                   view: str, chunk: int = 256) -> tuple[np.ndarray, np.ndarray, list]:
    """Deterministic (noise-free) interests of every evaluation user plus item vectors."""
    if view not in model.views:
        raise ValueError(f"view {view!r} is absent from a {model.config.view_mode} model")
    inst = eval_instances(ds, model.config.max_len)
    outs = []
    items = None
    for start in range(0, len(inst), chunk):
        part = inst[start:start + chunk]
        prefix = np.stack([x.history for x in part])
        mask = np.stack([x.mask for x in part])
        tower = model.tower(view, prefix, mask, features, None)
        outs.append(tower.interests.data)
        items = tower.items.data
    return np.concatenate(outs), items, inst


def evaluate(model: BivRecModel, ds: InteractionDataset, features: np.ndarray | None, view: str,
             k: int | None = None, filter_history: bool | None = None,
             workers: int | None = None) -> MetricsReport:
    """User-averaged Recall/NDCG/HR@k of one tower on the held-out tail of each sequence."""
    cfg = model.config
    k = cfg.k_eval if k is None else k
    filter_history = cfg.filter_history if filter_history is None else filter_history
    workers = cfg.eval_workers if workers is None else workers
    interests, items, inst = user_interests(model, ds, features, view)

    def run(i: int) -> UserResult:
        exclude = set(int(x) for x in inst[i].history[inst[i].mask]) if filter_history else None
        ranked = retrieve_topk(interests[i], items, k, exclude)
        return score_user(ds.users[i].user, ranked, inst[i].truth, k)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(inst))))
    else:
        results = [run(i) for i in range(len(inst))]
    return aggregate(results, k, view)
