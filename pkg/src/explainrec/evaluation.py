"""Sampled top-k ranking evaluation and explanation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .data import POOL_SIZE, Dataset, FeatureTables, sample_candidates

METRICS = ("precision", "recall", "f1", "hit_rate", "ndcg", "mrr")
CSV_COLUMNS = ("Precision", "Recall", "F1", "Hit Rate", "NDCG", "MRR")
EXPLAIN_METRICS = ("precision", "recall", "f1", "ndcg")
REPORT_VERSION = 1


@dataclass(frozen=True)
class RankedList:
    user: Hashable
    items: tuple
    labels: tuple[bool, ...]

    def __post_init__(self):
        if len(set(self.items)) != len(self.items):
            raise ValueError(f"duplicate items in ranked list for user {self.user!r}")
        if len(self.items) != len(self.labels):
            raise ValueError("items and labels differ in length")


@dataclass
class EvalReport:
    metrics: dict[str, float]
    k: int = 10
    mrr_k: int = 1
    users_evaluated: int = 0
    users_skipped: int = 0
    lists: int = 0
    pool_size_min: int = 0
    pool_size_mean: float = 0.0
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"format_version": REPORT_VERSION, **asdict(self)}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def csv_row(self) -> list[str]:
        return [f"{self.metrics[m]:.4f}" for m in METRICS]


def rank_candidates(score_fn: Callable[[Sequence], np.ndarray], user, pool: Sequence, relevant: Iterable) -> RankedList:
    """Order ``pool`` by descending score; ties go to the smaller item id."""
    relevant = set(relevant)
    scores = np.asarray(score_fn(pool), dtype=np.float64)
    if scores.shape != (len(pool),):
        raise ValueError(f"scorer returned {scores.shape} for a pool of {len(pool)}")
    order = sorted(range(len(pool)), key=lambda n: (-scores[n], pool[n]))
    items = tuple(pool[n] for n in order)
    return RankedList(user, items, tuple(it in relevant for it in items))


_DISCOUNT = 1.0 / np.log2(np.arange(2, 1026, dtype=np.float64))


def _list_metrics(labels: np.ndarray, k: int) -> dict[str, float]:
    n_rel = int(labels.sum())
    top = labels[:k]
    hits = int(top.sum())
    p = hits / k
    r = hits / n_rel
    dcg = math.fsum(_DISCOUNT[np.flatnonzero(top)])
    idcg = math.fsum(_DISCOUNT[: min(k, n_rel)])
    return {
        "precision": p,
        "recall": r,
        "f1": 2 * p * r / (p + r) if hits else 0.0,
        "hit_rate": 1.0 if hits else 0.0,
        "ndcg": dcg / idcg,
        "mrr": 1.0 if labels[0] else 0.0,
    }


def ranking_metrics(lists: Sequence[RankedList], k: int = 10, config: Mapping | None = None) -> EvalReport:
    """Per-list metrics averaged within each user, then across users.

    MRR uses a cutoff of 1: it is 1 exactly when the top candidate is relevant.
    Lists without any relevant item are skipped and counted.
    """
    if not lists:
        raise ValueError("no ranked lists to evaluate")
    per_user: dict = {}
    skipped = set()
    for rl in lists:
        labels = np.asarray(rl.labels, dtype=bool)
        if not labels.any():
            skipped.add(rl.user)
            continue
        per_user.setdefault(rl.user, []).append(_list_metrics(labels, k))
    skipped -= set(per_user)
    user_means = [{m: math.fsum(row[m] for row in rows) / len(rows) for m in METRICS} for rows in per_user.values()]
    n = len(user_means)
    metrics = {m: (math.fsum(u[m] for u in user_means) / n if n else 0.0) for m in METRICS}
    sizes = [len(rl.items) for rl in lists]
    return EvalReport(
        metrics, k, 1, n, len(skipped), len(lists), min(sizes), float(np.mean(sizes)), dict(config or {})
    )


def brute_force_oracle(lists, k=10):
    """Deliberately naive re-derivation of the ranking metrics."""
    users = []
    for rl in lists:
        if rl.user not in users:
            users.append(rl.user)
    totals = {m: [] for m in METRICS}
    evaluated = 0
    for user in users:
        mine = [rl for rl in lists if rl.user == user and True in rl.labels]
        if not mine:
            continue
        evaluated += 1
        vals = {m: [] for m in METRICS}
        for rl in mine:
            relevant_total = 0
            for lab in rl.labels:
                if lab:
                    relevant_total += 1
            hits = 0
            dcg_terms = []
            for pos in range(k):
                if pos < len(rl.labels) and rl.labels[pos]:
                    hits += 1
                    dcg_terms.append(1.0 / math.log2(pos + 2))
            ideal_terms = []
            for pos in range(min(k, relevant_total)):
                ideal_terms.append(1.0 / math.log2(pos + 2))
            prec = hits / k
            rec = hits / relevant_total
            if prec + rec > 0:
                f1 = 2 * prec * rec / (prec + rec)
            else:
                f1 = 0.0
            vals["precision"].append(prec)
            vals["recall"].append(rec)
            vals["f1"].append(f1)
            vals["hit_rate"].append(1.0 if hits > 0 else 0.0)
            vals["ndcg"].append(math.fsum(dcg_terms) / math.fsum(ideal_terms))
            vals["mrr"].append(1.0 if rl.labels[0] else 0.0)
        for m in METRICS:
            totals[m].append(math.fsum(vals[m]) / len(vals[m]))
    out = {}
    for m in METRICS:
        out[m] = math.fsum(totals[m]) / evaluated if evaluated else 0.0
    sizes = [len(rl.items) for rl in lists]
    return EvalReport(out, k, 1, evaluated, len(users) - evaluated, len(lists), min(sizes), float(np.mean(sizes)))


# -- explanation metrics ------------------------------------------------


def top_k_indices(phi, k: int) -> list[int]:
    """Indices of the k largest nonzero entries; ties by index."""
    if k < 1:
        raise ValueError("k must be at least 1")
    phi = np.asarray(phi, dtype=np.float64)
    nz = np.flatnonzero(phi)
    order = sorted(nz.tolist(), key=lambda n: (-phi[n], n))
    return order[:k]


def explanation_metrics(phi, g_u: Iterable[int], k: int) -> tuple[float, float, float, float]:
    """(Precision@k, Recall@k, F1@k, NDCG@k) of the explanation ranking against g_u.

    Precision divides by k even when fewer than k entries are nonzero, so
    that precision·k and recall·|g_u| both count the same intersection.
    """
    g = set(int(x) for x in g_u)
    if not g:
        raise ValueError("empty ground-truth feature set")
    top = top_k_indices(phi, k)
    hits = [n in g for n in top]
    inter = sum(hits)
    p = inter / k
    r = inter / len(g)
    f1 = 2 * p * r / (p + r) if inter else 0.0
    dcg = math.fsum(_DISCOUNT[pos] for pos, h in enumerate(hits) if h)
    idcg = math.fsum(_DISCOUNT[: min(k, len(g))])
    return p, r, f1, dcg / idcg


# -- end-to-end sampled evaluation --------------------------------------


def model_scorer(model, tables: FeatureTables) -> Callable[[int, np.ndarray], np.ndarray]:
    def score(user: int, items: np.ndarray) -> np.ndarray:
        users = np.full(len(items), user, dtype=np.int64)
        if model.kind == "baseline":
            return model.score(users, items)
        return model.score(users, items, tables.user[users], tables.item[items])

    return score


def build_lists(
    score: Callable[[int, np.ndarray], np.ndarray],
    dataset: Dataset,
    pool_size: int = POOL_SIZE,
    seed: int = 0,
) -> list[RankedList]:
    """One ranked pool per (user, test positive), in user then item order."""
    interacted = dataset.interacted_items()
    tests = sorted(
        (dataset.user_index[r.user_id], dataset.item_index[r.item_id]) for r in dataset.test_records()
    )
    out = []
    for u, i in tests:
        user = dataset.users[u]
        rng = np.random.default_rng([seed, u, i])
        pool_ids = sample_candidates(dataset.items[i], dataset.items, interacted[user], pool_size, rng)
        pool = [dataset.item_index[it] for it in pool_ids]
        out.append(rank_candidates(lambda p, u=u: score(u, np.asarray(p, dtype=np.int64)), u, pool, {i}))
    return out


def evaluate(score, dataset: Dataset, pool_size: int = POOL_SIZE, k: int = 10, seed: int = 0, config=None) -> EvalReport:
    lists = build_lists(score, dataset, pool_size, seed)
    cfg = {"seed": seed, "pool_size": pool_size, "k": k, **dict(config or {})}
    return ranking_metrics(lists, k, cfg)


def random_scorer(seed: int, n_items: int) -> Callable[[int, np.ndarray], np.ndarray]:
    """Fixed uniform score per (user, item), independent of the pool."""

    def score(user: int, items: np.ndarray) -> np.ndarray:
        return np.random.default_rng([seed, user]).random(n_items)[np.asarray(items, dtype=np.int64)]

    return score
