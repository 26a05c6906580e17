"""Per-user explanation vectors, top-k words and cross-source correlation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import FeatureVocabulary, InteractionRecord
from .evaluation import top_k_indices
from .models import Model, attention_weights

SOURCES = ("GT", "NAR", "CAR", "CNR")


@dataclass
class ExplanationVector:
    user: object
    values: np.ndarray
    source: str
    normalization: str = "mean"
    empty: bool = False


def explanation_nar(model: Model, user: int, records: Iterable[InteractionRecord], vocab: FeatureVocabulary) -> ExplanationVector:
    """Mean attention weight per word over the user's interactions mentioning it."""
    P = vocab.size
    total = np.zeros(P)
    count = np.zeros(P)
    s = model.store
    e_u = s["user_emb"][user]
    for rec in records:
        support = sorted(vocab.index(w) for w in rec.words())
        if not support:
            continue
        alpha = attention_weights(e_u, s["word_emb"][support], s["att_user"])
        total[support] += alpha
        count[support] += 1
    phi = np.divide(total, count, out=np.zeros(P), where=count > 0)
    return ExplanationVector(user, phi, "NAR", "mean_attention", empty=not count.any())


def explanation_perturb(user, records: Sequence, kind: str, n_features: int) -> ExplanationVector:
    """Mean absolute perturbation over the user's records of ``kind``."""
    mine = [r.delta for r in records if r.user == user and r.kind == kind]
    source = "CAR" if kind == "adversarial" else "CNR"
    if not mine:
        return ExplanationVector(user, np.zeros(n_features), source, "mean_abs", empty=True)
    return ExplanationVector(user, np.abs(np.array(mine)).mean(axis=0), source, "mean_abs")


def perturbation_vectors(records: Sequence, kind: str, n_features: int) -> dict[int, np.ndarray]:
    """Same as :func:`explanation_perturb` for every user at once."""
    acc: dict[int, list[np.ndarray]] = {}
    for r in records:
        if r.kind == kind:
            acc.setdefault(r.user, []).append(np.abs(r.delta))
    return {u: np.mean(v, axis=0) for u, v in sorted(acc.items())}


def ground_truth_vector(g_u: Iterable[int], n_features: int) -> np.ndarray:
    v = np.zeros(n_features)
    v[list(g_u)] = 1.0
    return v


def top_k_words(phi, vocab: FeatureVocabulary, k: int = 5) -> list[str]:
    return [vocab.words[n] for n in top_k_indices(phi, k)]


def pearson(a, b) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    if np.array_equal(a, b):
        return 1.0
    ac, bc = a - a.mean(), b - b.mean()
    r = float(ac @ bc / np.sqrt((ac @ ac) * (bc @ bc)))
    return min(1.0, max(-1.0, r))


def pearson_matrix(vectors: Mapping[str, Mapping[object, np.ndarray]], sources: Sequence[str] | None = None):
    """Mean per-user Pearson correlation for every pair of sources.

    Only users present in every source are used. Users where either
    vector is constant are skipped for that pair; the skip counts are
    returned alongside the matrix.
    """
    sources = list(sources or vectors)
    common = set.intersection(*(set(vectors[s]) for s in sources))
    if not common:
        raise ValueError("no user has an explanation vector in every source")
    users = sorted(common)
    n = len(sources)
    mat = np.eye(n)
    skipped = np.zeros((n, n), dtype=int)
    for a in range(n):
        for b in range(a + 1, n):
            vals = []
            for u in users:
                r = pearson(vectors[sources[a]][u], vectors[sources[b]][u])
                if r is None:
                    skipped[a, b] += 1
                else:
                    vals.append(r)
            mat[a, b] = mat[b, a] = float(np.mean(vals)) if vals else float("nan")
            skipped[b, a] = skipped[a, b]
    return mat, sources, skipped, len(users)
