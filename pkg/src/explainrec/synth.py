"""Planted-preference synthetic datasets for desk-scale checks.

Every user prefers a small planted set of words and every item carries a
few attribute words. Users mostly interact with items sharing a planted
word and rate those highly, mentioning the shared words with positive
sentiment. Other interactions get low ratings and complaints about the
item's remaining attributes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import DEFAULT_T, Dataset, FeatureVocabulary, InteractionRecord, ValidationError, split_train_test


@dataclass
class SynthConfig:
    users: int = 50
    items: int = 100
    features: int = 40
    density: float = 0.05
    planted: int = 3
    item_attributes: int = 3
    match_rate: float = 0.7
    noise: float = 0.0
    T: int = DEFAULT_T

    def validate(self):
        if min(self.users, self.items, self.features) <= 0:
            raise ValidationError("users, items and features must be positive")
        if not 0 < self.density <= 1:
            raise ValidationError(f"density {self.density} must lie in (0, 1]")
        if not 0 < self.planted <= self.features:
            raise ValidationError("planted count must lie in [1, features]")
        if not 0 < self.item_attributes <= self.features:
            raise ValidationError("item attribute count must lie in [1, features]")
        if not 0 <= self.noise <= 1 or not 0 <= self.match_rate <= 1:
            raise ValidationError("noise and match_rate must lie in [0, 1]")
        if self.T < 2:
            raise ValidationError("T must be at least 2")


@dataclass
class SynthResult:
    dataset: Dataset
    planted: dict[str, list[int]]
    attributes: dict[str, list[int]]


def word_name(k: int, width: int) -> str:
    return f"w{k:0{width}d}"


def synth_generate(config: SynthConfig, seed: int = 0) -> SynthResult:
    config.validate()
    rng = np.random.default_rng(seed)
    M, N, P, T = config.users, config.items, config.features, config.T
    width = len(str(P - 1))
    words = [word_name(k, width) for k in range(P)]
    uwidth, iwidth = len(str(M - 1)), len(str(N - 1))
    user_ids = [f"u{u:0{uwidth}d}" for u in range(M)]
    item_ids = [f"i{i:0{iwidth}d}" for i in range(N)]

    planted = [np.sort(rng.choice(P, size=config.planted, replace=False)) for _ in range(M)]
    attrs = [np.sort(rng.choice(P, size=config.item_attributes, replace=False)) for _ in range(N)]
    attr_sets = [set(a.tolist()) for a in attrs]

    total = int(round(M * N * config.density))
    per_user = np.full(M, total // M)
    per_user[: total % M] += 1

    records = []
    for u in range(M):
        pref = set(planted[u].tolist())
        match = np.array([bool(pref & attr_sets[i]) for i in range(N)])
        matching, other = np.flatnonzero(match), np.flatnonzero(~match)
        n = int(min(per_user[u], N))
        n_match = int(min(rng.binomial(n, config.match_rate), matching.size))
        n_other = min(n - n_match, other.size)
        n_match = min(n - n_other, matching.size)
        chosen = list(rng.choice(matching, size=n_match, replace=False)) + list(
            rng.choice(other, size=n_other, replace=False)
        )
        for i in sorted(int(c) for c in chosen):
            liked = bool(pref & attr_sets[i])
            if rng.random() < config.noise:
                liked = not liked
            if liked:
                rating = int(rng.integers(T - 1, T + 1))
                shared = sorted(pref & attr_sets[i])
                feats = [(k, int(rng.integers(1, 4)), float(rng.uniform(0.3, 1.0))) for k in shared]
                for k in sorted(attr_sets[i] - pref):
                    if rng.random() < config.noise:
                        feats.append((k, 1, float(rng.uniform(-1.0, 1.0))))
            else:
                rating = int(rng.integers(1, T - 1))
                pool = sorted(attr_sets[i] - pref) or sorted(attr_sets[i])
                take = rng.choice(pool, size=min(len(pool), int(rng.integers(1, 3))), replace=False)
                feats = [(int(k), int(rng.integers(1, 3)), -float(rng.uniform(0.3, 1.0))) for k in sorted(take)]
            feats = tuple((words[k], f, round(s, 4)) for k, f, s in sorted(feats))
            records.append(InteractionRecord(user_ids[u], item_ids[i], rating, feats))

    vocab = FeatureVocabulary(tuple(words))
    ds = Dataset.from_records(records, T, vocab)
    train, test = split_train_test(ds, seed=seed)
    ds = ds.with_split(train, test, seed)
    return SynthResult(
        ds,
        {user_ids[u]: planted[u].tolist() for u in range(M)},
        {item_ids[i]: attrs[i].tolist() for i in range(N)},
    )


def config_dict(config: SynthConfig) -> dict:
    return asdict(config)
