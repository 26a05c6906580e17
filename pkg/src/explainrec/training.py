"""Pairwise BPR training plus the adversarial and counterfactual variants."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, FeatureTables, is_positive
from .diffcore import Tape, adam_step
from .models import FEATURE_MAPPED, Model, ScorerConfig

log = logging.getLogger(__name__)

DISTANCE_KINDS = ("l2", "elastic_net")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 0.001
    batch_size: int = 256
    negatives: int = 1
    epsilon: float = 0.5
    lam: float = 1.0
    xi: float = 0.001
    outer: int = 20
    distance: str = "elastic_net"
    theta_epochs: int = 1
    cf_steps: int = 100
    cf_lr: float = 0.5
    cf_tol: float = 1e-6
    cf_samples: int = 0  # 0 = one triple per training positive
    cf_label: str = "flipped"
    cf_weight: float = 0.02
    id_dim: int = 350
    feature_dim: int = 350
    hidden: tuple[int, ...] = (128, 64)
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.outer < 0 or self.theta_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr < 0 or self.lam < 0 or self.xi < 0 or self.epsilon < 0:
            raise ValueError("lr, lambda, xi and epsilon must be non-negative")
        if self.batch_size <= 0 or self.negatives <= 0:
            raise ValueError("batch size and negatives per positive must be positive")
        if self.cf_label not in ("flipped", "original"):
            raise ValueError("cf_label must be 'flipped' or 'original'")
        if self.distance not in DISTANCE_KINDS:
            raise ValueError(f"distance must be one of {DISTANCE_KINDS}")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainData:
    """Index-space view of the training partition."""

    user_features: np.ndarray
    item_features: np.ndarray
    pos_users: np.ndarray
    pos_items: np.ndarray
    positives: list[set[int]]

    @property
    def n_users(self) -> int:
        return self.user_features.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_features.shape[0]

    @property
    def n_features(self) -> int:
        return self.user_features.shape[1]

    @classmethod
    def from_dataset(cls, ds: Dataset, tables: FeatureTables | None = None) -> "TrainData":
        tables = tables or FeatureTables.build(ds)
        pairs = []
        positives: list[set[int]] = [set() for _ in range(ds.n_users)]
        for n in ds.train_idx:
            rec = ds.records[n]
            if is_positive(rec.rating, ds.T):
                u, i = ds.user_index[rec.user_id], ds.item_index[rec.item_id]
                pairs.append((u, i))
                positives[u].add(i)
        pairs.sort()
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        return cls(tables.user, tables.item, arr[:, 0], arr[:, 1], positives)


@dataclass
class TripleBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    fu: np.ndarray
    fi_pos: np.ndarray
    fi_neg: np.ndarray

    @classmethod
    def build(cls, data: TrainData, users, pos, neg) -> "TripleBatch":
        users, pos, neg = (np.asarray(a, dtype=np.int64) for a in (users, pos, neg))
        return cls(users, pos, neg, data.user_features[users], data.item_features[pos], data.item_features[neg])

    def __len__(self):
        return self.users.size

    def take(self, idx) -> "TripleBatch":
        return TripleBatch(*(getattr(self, f)[idx] for f in ("users", "pos", "neg", "fu", "fi_pos", "fi_neg")))


@dataclass
class PerturbationRecord:
    user: int
    pos_item: int
    neg_item: int
    kind: str
    delta: np.ndarray
    flipped: bool
    l2_norm: float = field(init=False)
    l1_norm: float = field(init=False)

    def __post_init__(self):
        self.l2_norm = float(np.linalg.norm(self.delta))
        self.l1_norm = float(np.abs(self.delta).sum())


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    records: list[PerturbationRecord] = field(default_factory=list)


# -- sampling and losses ----------------------------------------------------


def sample_bpr_triples(data: TrainData, negatives: int, rng: np.random.Generator):
    """One shuffled pass of (user, positive, negative) index triples.

    Negatives are drawn uniformly by rejection from items outside the
    user's training positives.
    """
    users = np.repeat(data.pos_users, negatives)
    pos = np.repeat(data.pos_items, negatives)
    keep = np.array([len(data.positives[u]) < data.n_items for u in users], dtype=bool)
    if not keep.all():
        skipped = sorted({int(u) for u in users[~keep]})
        log.warning("skipping %d users whose positives cover the catalog", len(skipped))
        users, pos = users[keep], pos[keep]
    neg = rng.integers(data.n_items, size=users.size)
    for t in range(users.size):
        seen = data.positives[users[t]]
        while int(neg[t]) in seen:
            neg[t] = rng.integers(data.n_items)
    order = rng.permutation(users.size)
    return users[order], pos[order], neg[order]


def margin_node(tape: Tape, model: Model, batch: TripleBatch, fu=None, delta=None, trainable=True):
    fu = batch.fu if fu is None else fu
    r_pos = model.forward(tape, batch.users, batch.pos, fu, batch.fi_pos, delta, trainable)
    r_neg = model.forward(tape, batch.users, batch.neg, fu, batch.fi_neg, delta, trainable)
    return tape.sub(r_pos, r_neg)


def bpr_loss_node(tape: Tape, model: Model, batch: TripleBatch, fu=None, delta=None, trainable=True):
    """Mean of -log σ(R_ui - R_uj) over the batch."""
    return tape.scale(tape.mean(tape.log_sigmoid(margin_node(tape, model, batch, fu, delta, trainable))), -1.0)


def bpr_loss(model: Model, batch: TripleBatch, delta=None) -> float:
    if len(batch) == 0:
        raise ValueError("bpr_loss needs at least one triple")
    return float(bpr_loss_node(Tape(), model, batch, delta=delta, trainable=False).value)


def margins(model: Model, batch: TripleBatch, delta=None) -> np.ndarray:
    if model.kind == "baseline":
        return model.score(batch.users, batch.pos) - model.score(batch.users, batch.neg)
    return model.score(batch.users, batch.pos, batch.fu, batch.fi_pos, delta) - model.score(
        batch.users, batch.neg, batch.fu, batch.fi_neg, delta
    )


def _clean_grads(model, batch):
    tape = Tape()
    loss = bpr_loss_node(tape, model, batch)
    return float(loss.value), tape.backward(loss)


def _check_finite(value, what):
    if not np.isfinite(value):
        raise TrainingAborted(f"non-finite {what} ({value}); aborting")


# -- adversarial perturbation -------------------------------------------


def input_gradient(model: Model, batch: TripleBatch, delta=None) -> np.ndarray:
    """∂L_BPR/∂f_u for each triple's user feature row."""
    if model.kind not in FEATURE_MAPPED and model.kind != "nar":
        raise ValueError(f"{model.kind} has no user feature input")
    tape = Tape()
    fu = tape.input(batch.fu, "fu")
    loss = bpr_loss_node(tape, model, batch, fu=fu, delta=delta, trainable=False)
    return tape.backward(loss)["input:fu"]


def normalize_rows(grad: np.ndarray, support: np.ndarray, epsilon: float) -> np.ndarray:
    g = np.where(support, grad, 0.0)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    return np.divide(epsilon * g, norms, out=np.zeros_like(g), where=norms > 0)


def fgsm_perturbation(model: Model, batch: TripleBatch, epsilon: float) -> np.ndarray:
    """ε·Δ/‖Δ‖₂ per triple, restricted to the user's feature support."""
    return normalize_rows(input_gradient(model, batch), batch.fu != 0, epsilon)


def adversarial_records(model: Model, batch: TripleBatch, epsilon: float) -> list[PerturbationRecord]:
    delta = fgsm_perturbation(model, batch, epsilon)
    flipped = margins(model, batch, delta) < 0
    return [
        PerturbationRecord(int(batch.users[t]), int(batch.pos[t]), int(batch.neg[t]), "adversarial", delta[t], bool(flipped[t]))
        for t in range(len(batch))
    ]


# -- counterfactual search ----------------------------------------------


def elastic_net_dist(delta, kind: str = "elastic_net"):
    """‖δ‖₂² + ‖δ‖₁ (or just ‖δ‖₂² for ``kind="l2"``), row-wise for 2-D input."""
    delta = np.asarray(delta, dtype=np.float64)
    sq = (delta * delta).sum(axis=-1)
    if kind == "l2":
        return sq
    if kind != "elastic_net":
        raise ValueError(f"unknown distance {kind!r}")
    return sq + np.abs(delta).sum(axis=-1)


def counterfactual_search(
    model: Model,
    batch: TripleBatch,
    xi: float = 0.001,
    distance: str = "elastic_net",
    steps: int = 100,
    lr: float = 0.05,
    tol: float = 1e-6,
) -> list[PerturbationRecord]:
    """Find per-triple user-feature perturbations that flip R_ui > R_uj.

    Proximal gradient descent on -log σ(R_uj - R_ui) + ξ·dist with the
    model frozen: the flip loss takes a gradient step, then the penalty is
    applied through its proximal map (soft-threshold for the lasso part,
    shrink by 1/(1 + 2·lr·ξ) for the ridge part). Elastic-net perturbations
    therefore contain exact zeros, and large ξ cannot make the step diverge. A triple stops once it
    is flipped and its distance no longer improves by ``tol``.
    Triples that are not currently ranked correctly are dropped.
    """
    if model.kind not in FEATURE_MAPPED:
        raise ValueError(f"counterfactual search needs a feature-mapped model, got {model.kind}")
    if distance not in DISTANCE_KINDS:
        raise ValueError(f"unknown distance {distance!r}")
    start = margins(model, batch)
    batch = batch.take(np.flatnonzero(start > 0))
    B = len(batch)
    if B == 0:
        return []
    support = batch.fu != 0
    delta = np.zeros_like(batch.fu)
    active = np.ones(B, dtype=bool)
    prev = np.full(B, np.inf)
    margin = np.zeros(B)
    for step in range(steps + 1):
        tape = Tape()
        d = tape.input(delta, "delta")
        m = margin_node(tape, model, batch, delta=d, trainable=False)
        # sum, not mean: each row's gradient must not depend on batch size
        loss = tape.scale(tape.sum(tape.log_sigmoid(tape.scale(m, -1.0))), -1.0)
        margin = m.value.copy()
        dist = elastic_net_dist(delta, distance)
        done = (margin < 0) & (prev - dist < tol)
        active &= ~done
        if step == steps or not active.any():
            break
        new = delta - lr * tape.backward(loss)["input:delta"]
        if distance == "elastic_net":
            new = np.sign(new) * np.maximum(np.abs(new) - lr * xi, 0.0)
        new = np.where(support, new / (1.0 + 2.0 * lr * xi), 0.0)
        delta[active] = new[active]
        prev = dist
    return [
        PerturbationRecord(int(batch.users[t]), int(batch.pos[t]), int(batch.neg[t]), "counterfactual", delta[t].copy(), bool(margin[t] < 0))
        for t in range(B)
    ]


# -- training loops -------------------------------------------------------


def _scorer_config(kind: str, data: TrainData, config: TrainConfig) -> ScorerConfig:
    return ScorerConfig(
        kind, data.n_users, data.n_items, data.n_features, config.id_dim, config.feature_dim, config.hidden
    )


def _batches(n, size):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


def _epochs(model, data, config, rng, epochs, lam=None, log_rows=None, epoch_offset=0):
    for epoch in range(epochs):
        tic = time.perf_counter()
        triples = TripleBatch.build(data, *sample_bpr_triples(data, config.negatives, rng))
        clean_total = adv_total = 0.0
        for idx in _batches(len(triples), config.batch_size):
            batch = triples.take(idx)
            if lam is None:
                loss, grads = _clean_grads(model, batch)
            else:
                loss, adv, grads = _adversarial_grads(model, batch, config.epsilon, lam)
                adv_total += adv * idx.size
            _check_finite(loss, "training loss")
            clean_total += loss * idx.size
            adam_step(model.store, grads, config.lr)
        n = max(len(triples), 1)
        row = {"epoch": epoch_offset + epoch + 1, "clean_loss": clean_total / n}
        if lam is not None:
            row["adv_loss"] = adv_total / n
        log_rows.append(row)
        log.info("epoch %d loss %.6f (%.2fs)", row["epoch"], row["clean_loss"], time.perf_counter() - tic)


def _adversarial_grads(model, batch, epsilon, lam):
    tape = Tape()
    fu = tape.input(batch.fu, "fu")
    clean = bpr_loss_node(tape, model, batch, fu=fu)
    grads = tape.backward(clean)
    delta = normalize_rows(grads.pop("input:fu"), batch.fu != 0, epsilon)
    tape = Tape()
    adv = bpr_loss_node(tape, model, batch, delta=delta)
    adv_grads = tape.backward(adv)
    _check_finite(float(adv.value), "adversarial loss")
    total = {name: g + lam * adv_grads[name] for name, g in grads.items()}
    return float(clean.value), float(adv.value), total


def _start(kind, data, config):
    config.validate()
    model = Model.init(_scorer_config(kind, data, config), config.seed)
    rng = np.random.default_rng([config.seed, 1])
    return model, rng


def train_bpr(kind: str, data: TrainData, config: TrainConfig) -> TrainResult:
    model, rng = _start(kind, data, config)
    rows: list[dict] = []
    _epochs(model, data, config, rng, config.epochs, log_rows=rows)
    return TrainResult(model, rows)


def train_adversarial(data: TrainData, config: TrainConfig, kind: str = "car") -> TrainResult:
    """Minimise clean BPR plus λ times BPR on FGSM-perturbed user features.

    The perturbation for every batch is recomputed against the current
    parameters and reuses the batch's own triples.
    """
    model, rng = _start(kind, data, config)
    rows: list[dict] = []
    _epochs(model, data, config, rng, config.epochs, lam=config.lam, log_rows=rows)
    return TrainResult(model, rows)


def sample_search_batch(data: TrainData, config: TrainConfig, rng) -> TripleBatch:
    users, pos, neg = sample_bpr_triples(data, 1, rng)
    if config.cf_samples and users.size > config.cf_samples:
        users, pos, neg = users[: config.cf_samples], pos[: config.cf_samples], neg[: config.cf_samples]
    return TripleBatch.build(data, users, pos, neg)


def search_all(model, batch: TripleBatch, config: TrainConfig, chunk: int = 2048) -> list[PerturbationRecord]:
    out = []
    for idx in _batches(len(batch), chunk):
        out.extend(
            counterfactual_search(
                model, batch.take(idx), config.xi, config.distance, config.cf_steps, config.cf_lr, config.cf_tol
            )
        )
    return out


def _records_batch(data: TrainData, records, reverse: bool = False) -> tuple[TripleBatch, np.ndarray]:
    pos = [r.pos_item for r in records]
    neg = [r.neg_item for r in records]
    if reverse:
        pos, neg = neg, pos
    batch = TripleBatch.build(data, [r.user for r in records], pos, neg)
    return batch, np.array([r.delta for r in records]).reshape(len(records), data.n_features)


def train_counterfactual(data: TrainData, config: TrainConfig, kind: str = "cnr", observer=None) -> TrainResult:
    """Plain BPR warm start, then ``outer`` rounds of (search δ, refit θ).

    Each refit minimises clean BPR plus BPR on the round's flipped
    counterfactual triples with their preference reversed: in the world
    f_u + δ the user prefers the negative item. This is the θ-side
    maximisation of the original-label loss on the counterfactual set,
    while the clean term keeps the ranker trained.

    ``observer(round, model, records)``, if given, runs right after each
    search while the model still holds the search-time parameters.
    """
    model, rng = _start(kind, data, config)
    rows: list[dict] = []
    _epochs(model, data, config, rng, config.epochs, log_rows=rows)
    records: list[PerturbationRecord] = []
    for rnd in range(config.outer):
        tic = time.perf_counter()
        records = search_all(model, sample_search_batch(data, config, rng), config)
        if observer is not None:
            observer(rnd + 1, model, records)
        if config.cf_label == "flipped":
            aug = [r for r in records if r.flipped]
        else:
            aug = [r for r in records if r.l1_norm > 0]
        clean_total = cf_total = 0.0
        n_clean = n_cf = 0
        for _ in range(config.theta_epochs):
            triples = TripleBatch.build(data, *sample_bpr_triples(data, config.negatives, rng))
            order = rng.permutation(len(aug))
            chunks = list(_batches(len(triples), config.batch_size))
            cf_chunks = np.array_split(order, len(chunks)) if aug else [np.array([], dtype=np.int64)] * len(chunks)
            for idx, cf_idx in zip(chunks, cf_chunks):
                tape = Tape()
                loss = bpr_loss_node(tape, model, triples.take(idx))
                grads = tape.backward(loss)
                _check_finite(float(loss.value), "training loss")
                clean_total += float(loss.value) * idx.size
                n_clean += idx.size
                if cf_idx.size:
                    cf_batch, deltas = _records_batch(data, [aug[k] for k in cf_idx], reverse=config.cf_label == "flipped")
                    tape = Tape()
                    cf_loss = bpr_loss_node(tape, model, cf_batch, delta=deltas)
                    _check_finite(float(cf_loss.value), "counterfactual loss")
                    cf_grads = tape.backward(cf_loss)
                    grads = {name: g + config.cf_weight * cf_grads[name] for name, g in grads.items()}
                    cf_total += float(cf_loss.value) * cf_idx.size
                    n_cf += cf_idx.size
                adam_step(model.store, grads, config.lr)
        flips = sum(r.flipped for r in records)
        row = {
            "round": rnd + 1,
            "searched": len(records),
            "flip_rate": flips / len(records) if records else 0.0,
            "mean_dist": float(np.mean([elastic_net_dist(r.delta, config.distance) for r in records])) if records else 0.0,
            "clean_loss": clean_total / max(n_clean, 1),
            "cf_loss": cf_total / max(n_cf, 1),
        }
        rows.append(row)
        log.info("round %d flip rate %.3f (%.2fs)", rnd + 1, row["flip_rate"], time.perf_counter() - tic)
    return TrainResult(model, rows, records)


def train_model(kind: str, data: TrainData, config: TrainConfig) -> TrainResult:
    kind = kind.lower()
    if kind == "car":
        return train_adversarial(data, config)
    if kind == "cnr":
        return train_counterfactual(data, config)
    return train_bpr(kind, data, config)


def final_perturbations(result: TrainResult, data: TrainData, config: TrainConfig) -> list[PerturbationRecord]:
    """Perturbation records used for explanations.

    CNR keeps the last round's search; CAR gets one FGSM record per
    training positive against the final parameters.
    """
    model = result.model
    if model.kind == "cnr":
        return result.records
    if model.kind != "car":
        return []
    rng = np.random.default_rng([config.seed, 2])
    batch = TripleBatch.build(data, *sample_bpr_triples(data, 1, rng))
    out = []
    for idx in _batches(len(batch), 2048):
        out.extend(adversarial_records(model, batch.take(idx), config.epsilon))
    return out
