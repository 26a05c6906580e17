"""Scoring networks: attention (NAR), feature-mapping (CAR/CNR) and ID-only baseline.

All share the ID embedding tables and the MLP head. CAR and CNR have the
same architecture; they differ only in how they are trained.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import DTYPE, Node, ParamStore, ShapeError, Tape, masked_softmax

MODEL_KINDS = ("nar", "car", "cnr", "baseline")
FEATURE_MAPPED = ("car", "cnr")


@dataclass
class ScorerConfig:
    kind: str
    n_users: int
    n_items: int
    n_features: int
    id_dim: int = 350
    feature_dim: int = 350
    hidden: tuple[int, ...] = (128, 64)
    activation: str = "relu"

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.activation != "relu":
            raise ValueError("only the relu activation is implemented")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def mlp_input(self) -> int:
        return self.id_dim if self.kind == "baseline" else self.id_dim + self.feature_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Model:
    config: ScorerConfig
    store: ParamStore = field(repr=False)

    @classmethod
    def init(cls, config: ScorerConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng([seed, 0])
        store = ParamStore(seed)
        c = config
        store.init_uniform("user_emb", (c.n_users, c.id_dim), rng)
        store.init_uniform("item_emb", (c.n_items, c.id_dim), rng)
        if c.kind == "nar":
            store.init_uniform("word_emb", (c.n_features, c.feature_dim), rng)
            store.init_uniform("att_user", (c.id_dim, c.feature_dim), rng, dim=c.id_dim)
            store.init_uniform("att_item", (c.id_dim, c.feature_dim), rng, dim=c.id_dim)
        elif c.kind in FEATURE_MAPPED:
            store.init_uniform("map_user", (c.n_features, c.feature_dim), rng, dim=c.n_features)
            store.init_uniform("map_item", (c.n_features, c.feature_dim), rng, dim=c.n_features)
        sizes = (c.mlp_input, *c.hidden, 1)
        for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            store.init_uniform(f"mlp{layer}_w", (fan_in, fan_out), rng, dim=fan_in)
            store.init_zeros(f"mlp{layer}_b", (fan_out,))
        return cls(config, store)

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def n_layers(self) -> int:
        return len(self.config.hidden) + 1

    def _check_ids(self, users, items):
        users = np.asarray(users, dtype=np.int64).reshape(-1)
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        if users.shape != items.shape:
            raise ShapeError(f"{users.size} users vs {items.size} items")
        if users.size and (users.min() < 0 or users.max() >= self.config.n_users):
            raise IndexError("unknown user index")
        if items.size and (items.min() < 0 or items.max() >= self.config.n_items):
            raise IndexError("unknown item index")
        return users, items

    def _check_features(self, arr, name, batch):
        arr = np.asarray(arr, dtype=DTYPE)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape != (batch, self.config.n_features):
            raise ShapeError(f"{name} has shape {arr.shape}, expected ({batch}, {self.config.n_features})")
        return arr

    def mlp(self, tape: Tape, x: Node, trainable: bool = True) -> Node:
        for layer in range(self.n_layers):
            w = tape.param(self.store, f"mlp{layer}_w", trainable)
            b = tape.param(self.store, f"mlp{layer}_b", trainable)
            x = tape.add_bias(tape.matmul(x, w), b)
            if layer < self.n_layers - 1:
                x = tape.relu(x)
        return tape.flatten(x)

    def forward(self, tape: Tape, users, items, fu=None, fi=None, delta=None, trainable: bool = True) -> Node:
        """Record a batch of relevance scores on ``tape``.

        ``fu``, ``fi`` and ``delta`` may be arrays (treated as constants) or
        nodes already on the tape (e.g. a flagged differentiable input).
        Returns a node of shape (B,).
        """
        users, items = self._check_ids(users, items)
        B = users.size
        p = lambda name: tape.param(self.store, name, trainable)  # noqa: E731
        e_u = tape.gather(p("user_emb"), users)
        e_i = tape.gather(p("item_emb"), items)
        id_part = tape.mul(e_u, e_i)
        if self.kind == "baseline":
            if delta is not None:
                raise ValueError("the baseline has no feature input to perturb")
            return self.mlp(tape, id_part, trainable)

        fu_node = self._as_node(tape, fu, "fu", B)
        fi_node = self._as_node(tape, fi, "fi", B)
        if self.kind == "nar":
            if delta is not None:
                raise ValueError("NAR scores are not perturbed")
            words = p("word_emb")
            f_user = self._attend(tape, e_u, p("att_user"), words, fu_node)
            f_item = self._attend(tape, e_i, p("att_item"), words, fi_node)
        else:
            if delta is not None:
                fu_node = tape.add(fu_node, self._as_node(tape, delta, "delta", B))
            f_user = tape.matmul(fu_node, p("map_user"))
            f_item = tape.matmul(fi_node, p("map_item"))
        return self.mlp(tape, tape.concat(id_part, tape.mul(f_user, f_item)), trainable)

    def _as_node(self, tape, value, name, batch):
        if isinstance(value, Node):
            if value.shape != (batch, self.config.n_features):
                raise ShapeError(f"{name} node has shape {value.shape}, expected ({batch}, {self.config.n_features})")
            return value
        if value is None:
            raise ValueError(f"{self.kind} scoring needs {name}")
        return tape.constant(self._check_features(value, name, batch), name)

    @staticmethod
    def _attend(tape, ent, att, words, feats):
        # logits[b, k] = ent[b] @ att @ words[k], softmax over the nonzero support
        logits = tape.matmul(tape.matmul(ent, att), words, transpose_b=True)
        alpha = tape.masked_softmax(logits, feats.value != 0)
        return tape.matmul(tape.mul(alpha, feats), words)

    # -- plain numpy scoring ----------------------------------------------

    def score(self, users, items, fu=None, fi=None, delta=None) -> np.ndarray:
        tape = Tape()
        return self.forward(tape, users, items, fu, fi, delta, trainable=False).value.copy()

    def attention(self, user: int, support) -> np.ndarray:
        """User-side attention over ``support`` word indices."""
        if self.kind != "nar":
            raise ValueError("attention weights exist only for NAR")
        s = self.store
        return attention_weights(s["user_emb"][user], s["word_emb"][list(support)], s["att_user"])


def attention_weights(e_u, words, M_a) -> np.ndarray:
    """Softmax of the bilinear scores ``e_u @ M_a @ w_k`` over the given words."""
    words = np.atleast_2d(np.asarray(words, dtype=DTYPE))
    if words.shape[0] == 0:
        raise ValueError("attention over an empty support")
    logits = words @ (np.asarray(e_u, dtype=DTYPE) @ M_a)
    return masked_softmax(logits[None, :], np.ones((1, logits.size), dtype=bool))[0]


def aggregate_features(alpha, words, f) -> np.ndarray:
    """Sum of word embeddings weighted by attention times feature value."""
    alpha = np.asarray(alpha, dtype=DTYPE)
    f = np.asarray(f, dtype=DTYPE)
    return (alpha * f) @ np.atleast_2d(np.asarray(words, dtype=DTYPE))


def score_nar(model: Model, u: int, i: int, f_u, f_i) -> float:
    if model.kind != "nar":
        raise ValueError(f"score_nar on a {model.kind} model")
    return float(model.score([u], [i], f_u, f_i)[0])


def score_car(model: Model, u: int, i: int, f_u, f_i, delta=None) -> float:
    if model.kind not in FEATURE_MAPPED:
        raise ValueError(f"score_car on a {model.kind} model")
    return float(model.score([u], [i], f_u, f_i, delta)[0])


def score_baseline(model: Model, u: int, i: int) -> float:
    if model.kind != "baseline":
        raise ValueError(f"score_baseline on a {model.kind} model")
    return float(model.score([u], [i])[0])
