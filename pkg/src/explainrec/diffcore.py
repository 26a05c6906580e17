"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Only the handful of batched primitives the scoring networks need are
provided. Every op takes a leading batch axis where it makes sense and
checks shapes eagerly, so a bad wiring fails at the op that caused it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
CHECKPOINT_MAGIC = b"EXRCKPT\n"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class Node:
    __slots__ = ("index", "value", "parents", "vjp", "requires_grad", "label")

    def __init__(self, index, value, parents, vjp, requires_grad, label):
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.label = label

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index} {self.label} shape={self.value.shape})"


def _shape_error(op, tape, msg):
    return ShapeError(f"{op} (node #{len(tape.nodes)}): {msg}")


class Tape:
    """A single-use record of primitive operations.

    Nodes are appended as ops run, so creation order is already a
    topological order and backward is one reverse sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[str, Node] = {}
        self._inputs: dict[str, Node] = {}
        self._consumed = False

    # -- leaves -----------------------------------------------------------

    def _leaf(self, value, requires_grad, label):
        value = np.asarray(value, dtype=DTYPE)
        node = Node(len(self.nodes), value, (), None, requires_grad, label)
        self.nodes.append(node)
        return node

    def constant(self, value, label="const"):
        return self._leaf(value, False, label)

    def input(self, value, name: str, differentiable: bool = True) -> Node:
        """Register a named input; flagged inputs receive gradients."""
        if name in self._inputs:
            raise TapeError(f"input {name!r} registered twice")
        node = self._leaf(value, differentiable, f"input:{name}")
        self._inputs[name] = node
        return node

    def param(self, store: "ParamStore", name: str, trainable: bool = True) -> Node:
        if name in self._params:
            return self._params[name]
        # no copy: the tape only reads parameters
        node = Node(len(self.nodes), store[name], (), None, trainable, f"param:{name}")
        self.nodes.append(node)
        self._params[name] = node
        return node

    def _op(self, value, parents, vjp, label):
        requires = any(p.requires_grad for p in parents)
        node = Node(len(self.nodes), value, tuple(parents), vjp if requires else None, requires, label)
        self.nodes.append(node)
        return node

    # -- primitives -------------------------------------------------------

    def gather(self, table: Node, idx) -> Node:
        idx = np.asarray(idx, dtype=np.int64)
        if table.value.ndim != 2 or idx.ndim != 1:
            raise _shape_error("gather", self, f"table {table.shape} / index {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise _shape_error("gather", self, f"index out of range for table {table.label} with {table.shape[0]} rows")
        rows = table.shape[0]

        def vjp(g, needs):
            out = np.zeros((rows, g.shape[1]), dtype=DTYPE)
            np.add.at(out, idx, g)
            return (out,)

        return self._op(table.value[idx], (table,), vjp, "gather")

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        """(B, k) @ (k, n), or (B, k) @ (n, k).T when ``transpose_b``."""
        if a.value.ndim != 2 or b.value.ndim != 2:
            raise _shape_error("matmul", self, f"{a.label} {a.shape} x {b.label} {b.shape}")
        inner = b.shape[1] if transpose_b else b.shape[0]
        if a.shape[1] != inner:
            raise _shape_error("matmul", self, f"{a.label} {a.shape} x {b.label} {b.shape} (transpose_b={transpose_b})")
        av, bv = a.value, b.value

        def vjp(g, needs):
            ga = gb = None
            if transpose_b:
                if needs[0]:
                    ga = g @ bv
                if needs[1]:
                    gb = g.T @ av
            else:
                if needs[0]:
                    ga = g @ bv.T
                if needs[1]:
                    gb = av.T @ g
            return ga, gb

        out = av @ bv.T if transpose_b else av @ bv
        return self._op(out, (a, b), vjp, "matmul")

    def add_bias(self, a: Node, bias: Node) -> Node:
        if a.value.ndim != 2 or bias.value.shape != (a.shape[1],):
            raise _shape_error("add_bias", self, f"{a.shape} + {bias.shape}")

        def vjp(g, needs):
            return g, g.sum(axis=0)

        return self._op(a.value + bias.value, (a, bias), vjp, "add_bias")

    def _same_shape(self, op, a, b):
        if a.shape != b.shape:
            raise _shape_error(op, self, f"{a.label} {a.shape} vs {b.label} {b.shape}")

    def add(self, a: Node, b: Node) -> Node:
        self._same_shape("add", a, b)
        return self._op(a.value + b.value, (a, b), lambda g, needs: (g, g), "add")

    def sub(self, a: Node, b: Node) -> Node:
        self._same_shape("sub", a, b)
        return self._op(a.value - b.value, (a, b), lambda g, needs: (g, -g), "sub")

    def mul(self, a: Node, b: Node) -> Node:
        self._same_shape("mul", a, b)
        av, bv = a.value, b.value

        def vjp(g, needs):
            return (g * bv if needs[0] else None), (g * av if needs[1] else None)

        return self._op(av * bv, (a, b), vjp, "mul")

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._op(a.value * c, (a,), lambda g, needs: (g * c,), "scale")

    def concat(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
            raise _shape_error("concat", self, f"{a.shape} | {b.shape}")
        split = a.shape[1]

        def vjp(g, needs):
            return g[:, :split], g[:, split:]

        return self._op(np.concatenate([a.value, b.value], axis=1), (a, b), vjp, "concat")

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._op(np.where(mask, a.value, 0.0), (a,), lambda g, needs: (g * mask,), "relu")

    def sigmoid(self, a: Node) -> Node:
        s = sigmoid(a.value)
        return self._op(s, (a,), lambda g, needs: (g * s * (1.0 - s),), "sigmoid")

    def log_sigmoid(self, a: Node) -> Node:
        x = a.value
        return self._op(log_sigmoid(x), (a,), lambda g, needs: (g * sigmoid(-x),), "log_sigmoid")

    def masked_softmax(self, a: Node, mask) -> Node:
        """Softmax along the last axis over ``mask``; fully masked rows give zeros."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape or a.value.ndim != 2:
            raise _shape_error("masked_softmax", self, f"logits {a.shape} vs mask {mask.shape}")
        p = masked_softmax(a.value, mask)

        def vjp(g, needs):
            dot = (g * p).sum(axis=1, keepdims=True)
            return (p * (g - dot),)

        return self._op(p, (a,), vjp, "masked_softmax")

    def flatten(self, a: Node) -> Node:
        shape = a.shape
        return self._op(a.value.reshape(-1), (a,), lambda g, needs: (g.reshape(shape),), "flatten")

    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._op(np.asarray(a.value.sum()), (a,), lambda g, needs: (np.full(shape, g, dtype=DTYPE),), "sum")

    def mean(self, a: Node) -> Node:
        shape, n = a.shape, a.value.size
        if n == 0:
            raise _shape_error("mean", self, "mean of an empty array")
        return self._op(
            np.asarray(a.value.mean()), (a,), lambda g, needs: (np.full(shape, g / n, dtype=DTYPE),), "mean"
        )

    # -- reverse sweep ----------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for trainable params and flagged inputs.

        Keys are parameter names and ``"input:<name>"`` for inputs.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if not self.nodes or loss.index >= len(self.nodes) or self.nodes[loss.index] is not loss:
            raise TapeError("backward called on a node that was never computed on this tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None:
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            for parent, pg in zip(node.parents, node.vjp(g, needs)):
                if not parent.requires_grad or pg is None:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        out = {}
        for name, node in self._params.items():
            if node.requires_grad and node.index <= loss.index:
                g = grads[node.index]
                out[name] = np.zeros_like(node.value) if g is None else g
        for name, node in self._inputs.items():
            if node.requires_grad and node.index <= loss.index:
                g = grads[node.index]
                out["input:" + name] = np.zeros_like(node.value) if g is None else g
        return out


# -- numpy kernels shared with non-tape scoring paths -----------------------


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    # log σ(x) = -log(1 + e^-x), branching so exp never overflows
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))


def masked_softmax(x, mask):
    x = np.asarray(x, dtype=DTYPE)
    mask = np.asarray(mask, dtype=bool)
    shifted = np.where(mask, x, -np.inf)
    top = shifted.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x, 0.0) - top), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


# -- parameters -----------------------------------------------------------


class ParamStore:
    """Named parameter arrays plus Adam moment accumulators."""

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=DTYPE)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def init_uniform(self, name, shape, rng: np.random.Generator, dim: int | None = None):
        dim = dim or shape[-1]
        bound = 0.5 / np.sqrt(dim)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def init_zeros(self, name, shape):
        return self.add(name, np.zeros(shape, dtype=DTYPE))

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "ParamStore":
        other = ParamStore(self.seed)
        for name, value in self.params.items():
            other.params[name] = value.copy()
            other.m[name] = self.m[name].copy()
            other.v[name] = self.v[name].copy()
        other.t = self.t
        return other

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(str(self.params[name].shape).encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. Parameters absent from
    ``grads`` are treated as having zero gradient."""
    for name, g in grads.items():
        if name not in store.params:
            continue
        if g.shape != store.params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter is {store.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    store.t += 1
    bc1 = 1.0 - beta1**store.t
    bc2 = 1.0 - beta2**store.t
    for name, p in store.params.items():
        g = grads.get(name)
        m, v = store.m[name], store.v[name]
        m *= beta1
        v *= beta2
        if g is not None:
            m += (1.0 - beta1) * g
            v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# -- finite differences ---------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    build: Callable[[Tape], Node],
    arrays: Mapping[str, np.ndarray],
    probes: Iterable[tuple[str, int]],
    step: float = 1e-5,
    floor: float = 1e-7,
) -> float:
    """Worst relative error between backward and central differences.

    ``build`` records a scalar loss on a fresh tape reading from ``arrays``
    (parameter arrays and/or differentiable inputs, mutated in place here
    and restored). ``probes`` lists (gradient key, flat index) pairs; the
    gradient key is what ``Tape.backward`` reports for that array.
    """
    tape = Tape()
    loss = build(tape)
    grads = tape.backward(loss)
    worst = 0.0
    for key, flat in probes:
        target = arrays[key]
        view = target.reshape(-1)
        orig = view[flat]
        view[flat] = orig + step
        up = float(build(Tape()).value)
        view[flat] = orig - step
        down = float(build(Tape()).value)
        view[flat] = orig
        numeric = (up - down) / (2.0 * step)
        worst = max(worst, relative_error(float(grads[key].reshape(-1)[flat]), numeric, floor))
    return worst


# -- checkpoint container -------------------------------------------------


def save_checkpoint(path, store: ParamStore, meta: Mapping | None = None) -> str:
    """Write params as a named-array container; returns the sha256 of the file.

    Layout: magic, u64 little-endian header length, UTF-8 JSON header
    (sorted keys), then each array's little-endian float64 payload.
    """
    arrays, offset = [], 0
    for name in store.names():
        arr = store[name]
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": CHECKPOINT_VERSION,
        "seed": store.seed,
        "adam_step": store.t,
        "arrays": arrays,
        "meta": dict(meta or {}),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head
    blob += b"".join(np.ascontiguousarray(store[n], dtype="<f8").tobytes() for n in store.names())
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    start = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", blob[start : start + 8])
    header = json.loads(blob[start + 8 : start + 8 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    payload = memoryview(blob)[start + 8 + hlen :]
    store = ParamStore(header.get("seed"))
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        raw = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        store.add(entry["name"], raw.reshape(entry["shape"]))
    store.t = header.get("adam_step", 0)
    return store, header


def split_probes(arrays: Mapping[str, np.ndarray], count: int, rng: np.random.Generator,
                 keys: Sequence[str] | None = None) -> list[tuple[str, int]]:
    """Pick ``count`` random (key, flat index) probes spread over ``keys``."""
    keys = list(keys or arrays)
    picks = []
    for _ in range(count):
        key = keys[int(rng.integers(len(keys)))]
        picks.append((key, int(rng.integers(arrays[key].size))))
    return picks
