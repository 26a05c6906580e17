"""Interaction ingestion, review-feature decomposition and the train/test protocol."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .diffcore import sigmoid

DEFAULT_T = 5
MIN_POSITIVES_FOR_TEST = 5
POOL_SIZE = 100
MANIFEST_VERSION = 1


class ParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    rating: int
    features: tuple[tuple[str, int, float], ...] = ()

    def words(self) -> list[str]:
        return [w for w, _, _ in self.features]


@dataclass(frozen=True)
class FeatureVocabulary:
    words: tuple[str, ...]

    def __post_init__(self):
        if not self.words:
            raise ValidationError("feature vocabulary is empty")
        if len(set(self.words)) != len(self.words):
            raise ValidationError("feature vocabulary has duplicate words")
        object.__setattr__(self, "_index", {w: k for k, w in enumerate(self.words)})

    @classmethod
    def from_records(cls, records: Iterable[InteractionRecord]) -> "FeatureVocabulary":
        return cls(tuple(sorted({w for r in records for w, _, _ in r.features})))

    @property
    def size(self) -> int:
        return len(self.words)

    def index(self, word: str) -> int:
        return self._index[word]

    def __contains__(self, word):
        return word in self._index

    def __len__(self):
        return len(self.words)


@dataclass(frozen=True)
class DecomposedFeatures:
    user_vec: np.ndarray
    item_vec: np.ndarray
    support: tuple[int, ...]


# -- parsing --------------------------------------------------------------


def _parse_features(field_text: str, lineno: int) -> tuple[tuple[str, int, float], ...]:
    if not field_text.strip():
        return ()
    out, seen = [], set()
    for chunk in field_text.split(","):
        # words may themselves contain ':' (rare); the last two fields are numeric
        parts = chunk.rsplit(":", 2)
        if len(parts) != 3 or not parts[0]:
            raise ParseError(lineno, f"bad feature entry {chunk!r}, expected word:freq:sentiment")
        word, freq_s, sent_s = parts
        try:
            freq = int(freq_s)
            sent = float(sent_s)
        except ValueError:
            raise ParseError(lineno, f"bad numbers in feature entry {chunk!r}") from None
        if freq < 0:
            raise ParseError(lineno, f"negative frequency in {chunk!r}")
        if not -1.0 <= sent <= 1.0 or math.isnan(sent):
            raise ParseError(lineno, f"sentiment outside [-1, 1] in {chunk!r}")
        if word in seen:
            raise ParseError(lineno, f"duplicate word {word!r} within one record")
        seen.add(word)
        out.append((word, freq, sent))
    return tuple(out)


def parse_line(line: str, T: int = DEFAULT_T, lineno: int = 1) -> InteractionRecord:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) == 3:
        fields.append("")
    if len(fields) != 4:
        raise ParseError(lineno, f"expected 4 tab-separated fields, got {len(fields)}")
    user, item, rating_s, feats = fields
    if not user or not item:
        raise ParseError(lineno, "empty user or item id")
    try:
        rating = int(rating_s)
    except ValueError:
        raise ParseError(lineno, f"rating {rating_s!r} is not an integer") from None
    if not 1 <= rating <= T:
        raise ValidationError(f"line {lineno}: rating {rating} outside [1, {T}]")
    return InteractionRecord(user, item, rating, _parse_features(feats, lineno))


def parse_interactions(path, T: int = DEFAULT_T) -> list[InteractionRecord]:
    """Read an interaction file. Blank lines and ``#`` comment lines are skipped."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            records.append(parse_line(line, T, lineno))
    return records


def format_record(rec: InteractionRecord) -> str:
    feats = ",".join(f"{w}:{f}:{s:.6g}" for w, f, s in rec.features)
    return f"{rec.user_id}\t{rec.item_id}\t{rec.rating}\t{feats}"


def write_interactions(path, records: Sequence[InteractionRecord], header: Mapping | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(format_record(rec) + "\n")


def merge_duplicates(records: Sequence[InteractionRecord]) -> list[InteractionRecord]:
    """Collapse repeated (user, item) lines into one record.

    Frequencies are summed per word, sentiments averaged over the repeated
    mentions, and the highest rating kept. Order follows first appearance.
    """
    groups: dict[tuple[str, str], list[InteractionRecord]] = {}
    for rec in records:
        groups.setdefault((rec.user_id, rec.item_id), []).append(rec)
    merged = []
    for (user, item), recs in groups.items():
        if len(recs) == 1:
            merged.append(recs[0])
            continue
        freq: dict[str, int] = {}
        sents: dict[str, list[float]] = defaultdict(list)
        for rec in recs:
            for w, f, s in rec.features:
                freq[w] = freq.get(w, 0) + f
                sents[w].append(s)
        feats = tuple((w, freq[w], float(np.mean(sents[w]))) for w in freq)
        merged.append(InteractionRecord(user, item, max(r.rating for r in recs), feats))
    return merged


# -- labelling and feature values ---------------------------------------------------


def label_feedback(rating: int, T: int = DEFAULT_T) -> str:
    if not 1 <= rating <= T:
        raise ValidationError(f"rating {rating} outside [1, {T}]")
    return "positive" if rating >= T - 1 else "unlabeled"


def is_positive(rating: int, T: int = DEFAULT_T) -> bool:
    return rating >= T - 1


def item_sentiment_table(records: Iterable[InteractionRecord]) -> dict[tuple[str, str], float]:
    """Mean sentiment per (item, word) across every mention."""
    acc: dict[tuple[str, str], list[float]] = defaultdict(list)
    for rec in records:
        for w, _, s in rec.features:
            acc[(rec.item_id, w)].append(s)
    return {key: float(np.mean(vals)) for key, vals in acc.items()}


def compute_item_sentiment(records: Iterable[InteractionRecord], item: str, word: str) -> float:
    vals = [s for rec in records if rec.item_id == item for w, _, s in rec.features if w == word]
    # unmentioned pairs are neutral
    return float(np.mean(vals)) if vals else 0.0


def user_feature_value(freq, T: int = DEFAULT_T):
    freq = np.asarray(freq, dtype=np.float64)
    return 1.0 + (T - 1) * (2.0 * sigmoid(freq) - 1.0)


def item_feature_value(freq, sentiment, T: int = DEFAULT_T):
    x = np.asarray(freq, dtype=np.float64) * np.asarray(sentiment, dtype=np.float64)
    return 1.0 + (T - 1) * sigmoid(x)


def decompose_features(
    record: InteractionRecord,
    sentiments: Mapping[tuple[str, str], float],
    T: int,
    vocab: FeatureVocabulary,
) -> DecomposedFeatures:
    if T < 2:
        raise ValidationError("T must be at least 2")
    P = vocab.size
    fu = np.zeros(P)
    fi = np.zeros(P)
    support = []
    for w, f, _ in record.features:
        k = vocab.index(w)
        fu[k] = user_feature_value(f, T)
        fi[k] = item_feature_value(f, sentiments.get((record.item_id, w), 0.0), T)
        support.append(k)
    return DecomposedFeatures(fu, fi, tuple(sorted(support)))


# -- dataset --------------------------------------------------------------


@dataclass
class Dataset:
    records: list[InteractionRecord]
    vocab: FeatureVocabulary
    T: int = DEFAULT_T
    train_idx: tuple[int, ...] = ()
    test_idx: tuple[int, ...] = ()
    seed: int | None = None
    users: tuple[str, ...] = field(init=False)
    items: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        if not self.records:
            raise ValidationError("dataset has no interactions")
        for n, rec in enumerate(self.records):
            if not 1 <= rec.rating <= self.T:
                raise ValidationError(f"record {n}: rating {rec.rating} outside [1, {self.T}]")
        self.users = tuple(sorted({r.user_id for r in self.records}))
        self.items = tuple(sorted({r.item_id for r in self.records}))
        self.user_index = {u: k for k, u in enumerate(self.users)}
        self.item_index = {i: k for k, i in enumerate(self.items)}
        if set(self.train_idx) & set(self.test_idx):
            raise ValidationError("train and test partitions overlap")

    @classmethod
    def from_records(cls, records, T: int = DEFAULT_T, vocab: FeatureVocabulary | None = None):
        records = merge_duplicates(records)
        if vocab is None:
            vocab = FeatureVocabulary.from_records(records)
        return cls(list(records), vocab, T)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def positives_by_user(self, indices: Iterable[int] | None = None) -> dict[str, list[int]]:
        """Record indices of positive feedback per user, in record order."""
        out: dict[str, list[int]] = defaultdict(list)
        idx = range(len(self.records)) if indices is None else indices
        for n in idx:
            rec = self.records[n]
            if is_positive(rec.rating, self.T):
                out[rec.user_id].append(n)
        return dict(out)

    def interacted_items(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = defaultdict(set)
        for rec in self.records:
            out[rec.user_id].add(rec.item_id)
        return dict(out)

    def with_split(self, train_idx, test_idx, seed=None) -> "Dataset":
        return Dataset(self.records, self.vocab, self.T, tuple(train_idx), tuple(test_idx), seed)

    def train_records(self) -> list[InteractionRecord]:
        return [self.records[n] for n in self.train_idx]

    def test_records(self) -> list[InteractionRecord]:
        return [self.records[n] for n in self.test_idx]


def split_train_test(dataset: Dataset, ratio: int = 4, seed: int = 0) -> tuple[list[int], list[int]]:
    """Per-user random split of positives, ``ratio`` train parts to one test part.

    Users with at most five positives keep everything in train. Unlabeled
    interactions always stay in train as feature context.
    """
    if not dataset.records:
        raise ValidationError("cannot split an empty dataset")
    test: set[int] = set()
    positives = dataset.positives_by_user()
    for user in sorted(positives):
        idx = positives[user]
        if len(idx) <= MIN_POSITIVES_FOR_TEST:
            continue
        rng = np.random.default_rng([seed, dataset.user_index[user]])
        n_test = max(1, int(math.floor(len(idx) / (ratio + 1) + 0.5)))
        chosen = rng.choice(len(idx), size=n_test, replace=False)
        test.update(idx[c] for c in chosen)
    train = [n for n in range(len(dataset.records)) if n not in test]
    return train, sorted(test)


def sample_candidates(
    positive_item: str,
    all_items: Sequence[str],
    interacted: set[str],
    n: int = POOL_SIZE,
    rng: np.random.Generator | int = 0,
) -> list[str]:
    """Test positive plus up to ``n - 1`` items the user never interacted with."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    others = [it for it in all_items if it not in interacted and it != positive_item]
    if len(others) > n - 1:
        picks = rng.choice(len(others), size=n - 1, replace=False)
        others = [others[p] for p in sorted(picks)]
    return [positive_item] + others


def ground_truth_features(user: str, records: Iterable[InteractionRecord], vocab: FeatureVocabulary) -> set[int]:
    """Vocabulary indices the user expressed a nonzero sentiment about."""
    return {vocab.index(w) for rec in records if rec.user_id == user for w, _, s in rec.features if s != 0.0}


# -- feature tables used by the scorers -----------------------------------


@dataclass
class FeatureTables:
    """Per-entity feature-value vectors averaged over training interactions.

    Each entry is the mean over the entity's training interactions that
    mention the word, so on-support values stay inside [1, T].
    """

    user: np.ndarray
    item: np.ndarray

    @classmethod
    def build(cls, dataset: Dataset) -> "FeatureTables":
        train = dataset.train_records() if dataset.train_idx else list(dataset.records)
        sentiments = item_sentiment_table(train)
        P = dataset.vocab.size
        u_sum = np.zeros((dataset.n_users, P))
        u_cnt = np.zeros((dataset.n_users, P))
        i_sum = np.zeros((dataset.n_items, P))
        i_cnt = np.zeros((dataset.n_items, P))
        for rec in train:
            dec = decompose_features(rec, sentiments, dataset.T, dataset.vocab)
            if not dec.support:
                continue
            s = list(dec.support)
            u, i = dataset.user_index[rec.user_id], dataset.item_index[rec.item_id]
            u_sum[u, s] += dec.user_vec[s]
            u_cnt[u, s] += 1
            i_sum[i, s] += dec.item_vec[s]
            i_cnt[i, s] += 1
        user = np.divide(u_sum, u_cnt, out=np.zeros_like(u_sum), where=u_cnt > 0)
        item = np.divide(i_sum, i_cnt, out=np.zeros_like(i_sum), where=i_cnt > 0)
        return cls(user, item)


# -- manifest -------------------------------------------------------------


def write_manifest(path, dataset: Dataset, interactions_file: str, extra: Mapping | None = None) -> None:
    doc = {
        "format_version": MANIFEST_VERSION,
        "interactions": interactions_file,
        "T": dataset.T,
        "P": dataset.vocab.size,
        "seed": dataset.seed,
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "n_interactions": len(dataset.records),
        "train_idx": list(dataset.train_idx),
        "test_idx": list(dataset.test_idx),
        "vocabulary": list(dataset.vocab.words),
    }
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_dataset(manifest_path) -> tuple[Dataset, dict]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    records = parse_interactions(manifest_path.parent / doc["interactions"], doc["T"])
    vocab = FeatureVocabulary(tuple(doc["vocabulary"])) if "vocabulary" in doc else None
    ds = Dataset.from_records(records, doc["T"], vocab)
    if len(ds.records) != doc["n_interactions"]:
        raise ValidationError("manifest interaction count does not match the interaction file")
    return ds.with_split(doc["train_idx"], doc["test_idx"], doc.get("seed")), doc
