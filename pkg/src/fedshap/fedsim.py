"""In-process cross-silo FedAvg simulation.

The shared model is a one-hidden-layer rectifier network with a softmax
head; its hidden activations double as the per-datum feature extractor
that downstream logistic-regression proxies are trained on.

Every client participates in every round. Client updates within a round
are independent (each gets its own derived seed) and may run in parallel;
aggregation is the synchronization point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InstitutionShard, LabeledDataset
from .errors import FormatError
from .seeding import derive_seed


@dataclass
class FedConfig:
    """Federated-training hyperparameters.

    Local epochs and batch size follow the usual image-classification
    setup; the learning rate is sized for the small rectifier network
    trained here with plain SGD.
    """

    rounds: int = 5
    local_epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.1
    hidden_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")


@dataclass
class GlobalModel:
    """Parameters of the shared feature-extractor network."""

    hidden_weights: np.ndarray   # [num_features x hidden_dim]
    hidden_bias: np.ndarray      # [hidden_dim]
    output_weights: np.ndarray   # [hidden_dim x num_classes]
    output_bias: np.ndarray      # [num_classes]

    def __post_init__(self):
        for name in ("hidden_weights", "hidden_bias", "output_weights", "output_bias"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)
        d, h = self.hidden_weights.shape
        if self.hidden_bias.shape != (h,):
            raise ValueError("hidden_bias does not match hidden_weights")
        h2, c = self.output_weights.shape
        if h2 != h or self.output_bias.shape != (c,):
            raise ValueError("output layer does not match hidden layer")

    @property
    def num_features(self) -> int:
        return self.hidden_weights.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.hidden_weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.output_weights.shape[1]

    def copy(self) -> "GlobalModel":
        return GlobalModel(self.hidden_weights.copy(), self.hidden_bias.copy(),
                           self.output_weights.copy(), self.output_bias.copy())


def init_global(num_features: int, num_classes: int, config: FedConfig) -> GlobalModel:
    """Zero-mean init with scale 1/sqrt(fan_in); biases start at zero."""
    if num_features < 1 or num_classes < 1:
        raise ValueError("num_features and num_classes must be >= 1")
    rng = np.random.default_rng(config.seed)
    h = config.hidden_dim
    w1 = rng.normal(0.0, 1.0 / np.sqrt(num_features), size=(num_features, h))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, num_classes))
    return GlobalModel(w1, np.zeros(h), w2, np.zeros(num_classes))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def hidden_activations(model: GlobalModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != model.num_features:
        raise ValueError(
            f"feature dim {features.shape[1]} does not match model ({model.num_features})")
    return np.maximum(features @ model.hidden_weights + model.hidden_bias, 0.0)


def predict_proba(model: GlobalModel, features: np.ndarray) -> np.ndarray:
    """Row-wise class probabilities; each row sums to 1."""
    hidden = hidden_activations(model, features)
    return _softmax(hidden @ model.output_weights + model.output_bias)


def cross_entropy(model: GlobalModel, dataset: LabeledDataset) -> float:
    probs = predict_proba(model, dataset.features)
    picked = probs[np.arange(dataset.num_samples), dataset.labels]
    return float(-np.log(np.maximum(picked, 1e-300)).mean())


def extract_features(model: GlobalModel, dataset: LabeledDataset) -> LabeledDataset:
    """Hidden-layer activations as per-datum feature vectors; labels pass through."""
    return LabeledDataset(hidden_activations(model, dataset.features),
                          dataset.labels, dataset.num_classes)


def local_update(model: GlobalModel, shard: InstitutionShard, config: FedConfig,
                 seed: int | None = None) -> GlobalModel:
    """Run ``local_epochs`` of mini-batch SGD on cross-entropy; returns new params.

    The input model is left untouched. ``seed`` controls batch shuffling
    and defaults to the config seed.
    """
    data = shard.data
    if data.num_features != model.num_features:
        raise ValueError(
            f"shard feature dim {data.num_features} does not match model "
            f"({model.num_features})")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    out = model.copy()
    n = data.num_samples
    bs = min(config.batch_size, n)
    lr = config.learning_rate

    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            x = data.features[idx]
            y = data.labels[idx]
            b = len(idx)

            pre = x @ out.hidden_weights + out.hidden_bias
            hidden = np.maximum(pre, 0.0)
            probs = _softmax(hidden @ out.output_weights + out.output_bias)

            dlogits = probs
            dlogits[np.arange(b), y] -= 1.0
            dlogits /= b
            g_w2 = hidden.T @ dlogits
            g_b2 = dlogits.sum(axis=0)
            dhidden = (dlogits @ out.output_weights.T) * (pre > 0)
            g_w1 = x.T @ dhidden
            g_b1 = dhidden.sum(axis=0)

            out.hidden_weights -= lr * g_w1
            out.hidden_bias -= lr * g_b1
            out.output_weights -= lr * g_w2
            out.output_bias -= lr * g_b2
    return out


def fedavg_aggregate(updates: list[tuple[GlobalModel, int]]) -> GlobalModel:
    """Sample-count-weighted mean of client parameters, in 64-bit arithmetic."""
    if not updates:
        raise ValueError("fedavg_aggregate needs at least one update")
    ref = updates[0][0]
    for model, count in updates:
        if count < 1:
            raise ValueError("sample counts must be >= 1")
        if (model.hidden_weights.shape != ref.hidden_weights.shape
                or model.output_weights.shape != ref.output_weights.shape):
            raise ValueError("all client models must share dimensions")
    total = float(sum(count for _, count in updates))
    fields = ("hidden_weights", "hidden_bias", "output_weights", "output_bias")
    avg = {}
    for name in fields:
        stack = np.stack([getattr(m, name) for m, _ in updates])
        weights = np.array([c / total for _, c in updates])
        avg[name] = np.tensordot(weights, stack, axes=1)
    return GlobalModel(**avg)


def train_federated(shards: list[InstitutionShard], config: FedConfig) -> GlobalModel:
    """FedAvg over all shards: broadcast, local update, weighted aggregate.

    Every shard participates in every round. Client round seeds derive from
    (config seed, round, client) so the result is independent of scheduling
    order.
    """
    if not shards:
        raise ValueError("train_federated needs at least one shard")
    dims = {s.data.num_features for s in shards}
    if len(dims) != 1:
        raise ValueError(f"shards disagree on feature dim: {sorted(dims)}")
    num_classes = max(s.data.num_classes for s in shards)
    model = init_global(dims.pop(), num_classes, config)
    for r in range(config.rounds):
        updates = []
        for i, shard in enumerate(shards):
            client_seed = derive_seed(config.seed, "round", r, "client", i)
            updates.append((local_update(model, shard, config, seed=client_seed),
                            shard.data.num_samples))
        model = fedavg_aggregate(updates)
    return model


_GLOBAL_SCHEMA = "fedshap-global-v1"


def save_global(path, model: GlobalModel) -> None:
    """Checkpoint with bit-exact round-trip of all 64-bit parameters."""
    np.savez(path, schema=_GLOBAL_SCHEMA, hidden_weights=model.hidden_weights,
             hidden_bias=model.hidden_bias, output_weights=model.output_weights,
             output_bias=model.output_bias)


def load_global(path) -> GlobalModel:
    with np.load(path, allow_pickle=False) as z:
        if str(z["schema"]) != _GLOBAL_SCHEMA:
            raise FormatError(f"{path}: unknown checkpoint schema {z['schema']}")
        return GlobalModel(z["hidden_weights"], z["hidden_bias"],
                           z["output_weights"], z["output_bias"])
