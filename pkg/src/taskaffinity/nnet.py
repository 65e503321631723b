"""Dense feed-forward classifier substrate with exact hand-rolled backprop.

A network is an encoder (stack of fully connected layers, each followed by
the configured activation) plus a linear classification head.  Parameters
live in one flat float64 vector so that Fisher diagonals, serialization and
optimizer state are trivial to handle.  Everything is deterministic given a
seed, and minibatch order is keyed to sample indices only, never to label
values.

Flat layout: encoder layer 0 W (fan_in x fan_out, C-order) then bias, encoder
layer 1 W then bias, ..., head W (embedding x classes) then head bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: encoder widths (input first) plus head size."""

    layer_widths: tuple[int, ...]
    head_classes: int
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("layer_widths needs at least input and embedding dims")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.head_classes < 2:
            raise ValueError("head_classes must be >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def embedding_dim(self) -> int:
        return self.layer_widths[-1]

    def layer_shapes(self) -> Iterator[tuple[int, int]]:
        """(fan_in, fan_out) for each encoder layer, then for the head."""
        for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            yield a, b
        yield self.embedding_dim, self.head_classes

    @property
    def param_count(self) -> int:
        return sum(a * b + b for a, b in self.layer_shapes())


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable pairing of a spec with a flat float64 parameter vector."""

    spec: NetworkSpec
    params: np.ndarray

    def __post_init__(self) -> None:
        # Copy unconditionally: freezing an aliased input would surprise the
        # caller, whose array is often reused (finite-difference probes).
        p = np.array(self.params, dtype=np.float64, order="C")
        if p.ndim != 1 or p.shape[0] != self.spec.param_count:
            raise ValueError(
                f"params must be flat with {self.spec.param_count} entries, got shape {p.shape}"
            )
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def param_count(self) -> int:
        return self.params.shape[0]


@dataclass(frozen=True, eq=False)
class Batch:
    """Feature matrix (n x d) with one integer label per row.

    Label range against a particular head is checked at the ops that involve
    the head; a Batch may legitimately carry arbitrary nonnegative class ids
    when only the encoder touches it (centroid extraction).
    """

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if f.ndim != 2:
            raise ValueError("features must be 2-D")
        if y.ndim != 1 or y.shape[0] != f.shape[0]:
            raise ValueError("labels must be 1-D and aligned with features")
        if f.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if np.any(y < 0):
            raise ValueError("labels must be nonnegative")
        f.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class TrainSchedule:
    """Minibatch SGD hyperparameters; lr decays multiplicatively at the listed epochs."""

    learning_rate: float
    momentum: float
    epochs: int
    batch_size: int
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if any(e1 >= e2 for e1, e2 in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        if any(not 0 <= e < self.epochs for e in self.lr_decay_epochs):
            raise ValueError("lr_decay_epochs must lie in [0, epochs)")


# ---------------------------------------------------------------------------
# parameter packing


def _unpack(spec: NetworkSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer, encoder layers first, head last."""
    out = []
    off = 0
    for fan_in, fan_out in spec.layer_shapes():
        w = params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off : off + fan_out]
        off += fan_out
        out.append((w, b))
    return out


def encoder_slice(spec: NetworkSpec) -> slice:
    """Slice of the flat vector holding encoder parameters (head excluded)."""
    head_in, head_out = spec.embedding_dim, spec.head_classes
    return slice(0, spec.param_count - (head_in * head_out + head_out))


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """Fresh network: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_shapes():
        scale = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-scale, scale, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return Network(spec, np.concatenate(chunks))


# ---------------------------------------------------------------------------
# forward / loss / gradients


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _encoder_pass(net: Network, features: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """All encoder pre-activations and activations; activations[0] is the input."""
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.spec.input_dim:
        raise ValueError(f"features must be (n, {net.spec.input_dim})")
    layers = _unpack(net.spec, net.params)[:-1]
    pre, acts = [], [x]
    for w, b in layers:
        z = acts[-1] @ w + b
        pre.append(z)
        acts.append(_act(z, net.spec.activation))
    return pre, acts


def encode(net: Network, features: np.ndarray) -> np.ndarray:
    """Embeddings: forward through encoder layers only (head untouched)."""
    _, acts = _encoder_pass(net, features)
    return acts[-1]


def forward(net: Network, features: np.ndarray) -> np.ndarray:
    """Logits: encoder followed by the linear head."""
    wh, bh = _unpack(net.spec, net.params)[-1]
    return encode(net, features) @ wh + bh


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row max so huge logits stay finite."""
    z = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def _check_labels(net: Network, batch: Batch) -> None:
    if np.any(batch.labels >= net.spec.head_classes):
        raise ValueError(
            f"labels must be < head_classes ({net.spec.head_classes}), "
            f"got max {int(batch.labels.max())}"
        )


def loss(net: Network, data: Batch) -> float:
    """Mean cross-entropy, computed through log-sum-exp so it is finite for finite logits."""
    _check_labels(net, data)
    logits = forward(net, data.features)
    zmax = np.max(logits, axis=1)
    lse = zmax + np.log(np.sum(np.exp(logits - zmax[:, None]), axis=1))
    picked = logits[np.arange(data.n), data.labels]
    return float(np.mean(lse - picked))


def _backprop(
    net: Network, data: Batch, per_sample: bool
) -> np.ndarray:
    """Shared exact-backprop core.

    per_sample=False returns the mean-loss gradient (flat, length P).
    per_sample=True returns one row per sample (n x P), each the gradient of
    that sample's own loss.
    """
    _check_labels(net, data)
    spec = net.spec
    pre, acts = _encoder_pass(net, data.features)
    layers = _unpack(spec, net.params)
    wh, bh = layers[-1]
    logits = acts[-1] @ wh + bh
    n = data.n

    delta = softmax(logits)
    delta[np.arange(n), data.labels] -= 1.0
    if not per_sample:
        delta /= n

    if per_sample:
        grads = np.empty((n, net.param_count))
    else:
        grads = np.empty(net.param_count)

    def put(offset: int, dw: np.ndarray, db: np.ndarray, size_w: int, size_b: int) -> None:
        if per_sample:
            grads[:, offset : offset + size_w] = dw.reshape(n, size_w)
            grads[:, offset + size_w : offset + size_w + size_b] = db
        else:
            grads[offset : offset + size_w] = dw.ravel()
            grads[offset + size_w : offset + size_w + size_b] = db

    # head
    off = encoder_slice(spec).stop
    if per_sample:
        dwh = np.einsum("ni,nj->nij", acts[-1], delta)
        dbh = delta
    else:
        dwh = acts[-1].T @ delta
        dbh = delta.sum(axis=0)
    put(off, dwh, dbh, wh.size, bh.size)

    # encoder, last layer first
    g = delta @ wh.T
    offsets = []
    o = 0
    for fan_in, fan_out in spec.layer_shapes():
        offsets.append(o)
        o += fan_in * fan_out + fan_out
    for li in range(len(layers) - 2, -1, -1):
        w, b = layers[li]
        g = g * _act_deriv(pre[li], acts[li + 1], spec.activation)
        if per_sample:
            dw = np.einsum("ni,nj->nij", acts[li], g)
            db = g
        else:
            dw = acts[li].T @ g
            db = g.sum(axis=0)
        put(offsets[li], dw, db, w.size, b.size)
        if li > 0:
            g = g @ w.T
    return grads


def grad(net: Network, data: Batch) -> np.ndarray:
    """Exact gradient of the mean cross-entropy over the batch (flat, length P)."""
    return _backprop(net, data, per_sample=False)


def per_sample_grads(net: Network, data: Batch) -> np.ndarray:
    """Gradient of each sample's own loss, one row per sample (n x P)."""
    return _backprop(net, data, per_sample=True)


def encoder_pullback(net: Network, features: np.ndarray, grad_embeddings: np.ndarray) -> np.ndarray:
    """Backprop an upstream gradient on the embeddings down to the flat vector.

    Head entries of the result are zero.  This is the hook the episodic
    nearest-centroid loss uses to train the encoder without a linear head.
    """
    spec = net.spec
    pre, acts = _encoder_pass(net, features)
    g = np.ascontiguousarray(grad_embeddings, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise ValueError("grad_embeddings must match the embedding matrix shape")
    layers = _unpack(spec, net.params)[:-1]
    out = np.zeros(net.param_count)
    off = 0
    offsets = []
    for w, b in layers:
        offsets.append(off)
        off += w.size + b.size
    for li in range(len(layers) - 1, -1, -1):
        w, b = layers[li]
        g = g * _act_deriv(pre[li], acts[li + 1], spec.activation)
        o = offsets[li]
        out[o : o + w.size] = (acts[li].T @ g).ravel()
        out[o + w.size : o + w.size + b.size] = g.sum(axis=0)
        if li > 0:
            g = g @ w.T
    return out


# ---------------------------------------------------------------------------
# training / evaluation


def train(
    net: Network,
    data: Batch,
    schedule: TrainSchedule,
    stop_fn: Optional[Callable[[Network, int, list[float]], bool]] = None,
) -> tuple[Network, list[float]]:
    """Minibatch SGD with momentum; returns the trained network and per-epoch loss.

    Shuffling uses a generator seeded by schedule.seed and permutes sample
    indices; labels never influence batch composition.  stop_fn, if given, is
    called after each epoch with the current network and may end training
    early (used for epsilon-approximation fine-tuning).
    """
    _check_labels(net, data)
    rng = np.random.default_rng(schedule.seed)
    params = net.params.copy()
    velocity = np.zeros_like(params)
    lr = schedule.learning_rate
    history: list[float] = []
    decay_at = set(schedule.lr_decay_epochs)
    for epoch in range(schedule.epochs):
        if epoch in decay_at:
            lr *= schedule.lr_decay_factor
        order = rng.permutation(data.n)
        for lo in range(0, data.n, schedule.batch_size):
            idx = order[lo : lo + schedule.batch_size]
            mb = Batch(data.features[idx], data.labels[idx])
            g = grad(Network(net.spec, params), mb)
            velocity = schedule.momentum * velocity + g
            params = params - lr * velocity
        current = Network(net.spec, params)
        history.append(loss(current, data))
        if stop_fn is not None and stop_fn(current, epoch, history):
            return current, history
    return Network(net.spec, params), history


def evaluate(net: Network, data: Batch) -> float:
    """Accuracy under argmax prediction; logit ties go to the lowest class index."""
    _check_labels(net, data)
    preds = np.argmax(forward(net, data.features), axis=1)
    return float(np.mean(preds == data.labels))


def replace_head(net: Network, n_classes: int, seed: int) -> Network:
    """Copy the encoder verbatim and attach a freshly initialized head."""
    new_spec = NetworkSpec(net.spec.layer_widths, n_classes, net.spec.activation)
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(new_spec.embedding_dim)
    head_w = rng.uniform(-scale, scale, size=new_spec.embedding_dim * n_classes)
    enc = net.params[encoder_slice(net.spec)]
    return Network(new_spec, np.concatenate([enc, head_w, np.zeros(n_classes)]))


# ---------------------------------------------------------------------------
# serialization (JSON; float64 round-trips bit-exactly through repr)


def to_json_doc(net: Network) -> dict:
    return {
        "layer_widths": list(net.spec.layer_widths),
        "head_classes": net.spec.head_classes,
        "activation": net.spec.activation,
        "params": net.params.tolist(),
    }


def from_json_doc(doc: dict) -> Network:
    spec = NetworkSpec(
        tuple(doc["layer_widths"]), int(doc["head_classes"]), str(doc["activation"])
    )
    return Network(spec, np.asarray(doc["params"], dtype=np.float64))


def save_network(net: Network, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_json_doc(net), fh)


def load_network(path: str) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        return from_json_doc(json.load(fh))
