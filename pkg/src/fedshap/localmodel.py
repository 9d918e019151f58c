"""Per-institution multinomial logistic regression on extracted features.

These lightweight models are the only artifact that leaves a silo; their
softmax outputs are what coalition ensembles average over.

The solver is proximal gradient descent (ISTA) with a Lipschitz step:
deterministic, monotone in the penalized objective, and exact on the L1
term (soft-thresholding produces true zeros). Features are standardized
per institution before fitting; the statistics ride along in the model
for inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import FormatError


@dataclass
class LRConfig:
    l1_ratio: float = 0.5
    reg_strength: float = 1e-4
    max_epochs: int = 1000
    tolerance: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.l1_ratio <= 1.0:
            raise ValueError("l1_ratio must lie in [0, 1]")
        if self.reg_strength < 0:
            raise ValueError("reg_strength must be nonnegative")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class LocalLRModel:
    """Multinomial LR over standardized features, one per institution."""

    weights: np.ndarray        # [feature_dim x num_classes]
    bias: np.ndarray           # [num_classes]
    institution_id: int
    train_samples: int
    feature_mean: np.ndarray   # [feature_dim]
    feature_scale: np.ndarray  # [feature_dim]
    degenerate_class: int | None = None
    loss_history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_scale = np.asarray(self.feature_scale, dtype=np.float64)
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("model parameters must be finite")
        if self.train_samples < 1:
            raise ValueError("train_samples must be >= 1")
        d, c = self.weights.shape
        if self.bias.shape != (c,) or self.feature_mean.shape != (d,) \
                or self.feature_scale.shape != (d,):
            raise ValueError("parameter shapes are inconsistent")

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def smooth_loss_grad(weights: np.ndarray, bias: np.ndarray, features: np.ndarray,
                     labels: np.ndarray, l2: float):
    """Value and gradients of the smooth objective part.

    Smooth part = mean cross-entropy + 0.5 * l2 * ||W||_2^2 (bias unpenalized).
    """
    n = len(labels)
    probs = _softmax(features @ weights + bias)
    picked = probs[np.arange(n), labels]
    loss = -np.log(np.maximum(picked, 1e-300)).mean() + 0.5 * l2 * (weights ** 2).sum()
    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    g_w = features.T @ delta + l2 * weights
    g_b = delta.sum(axis=0)
    return loss, g_w, g_b


def _soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def train_lr(features: LabeledDataset, config: LRConfig,
             institution_id: int = 0) -> LocalLRModel:
    """Fit elastic-net multinomial LR; deterministic (zero init, fixed step).

    Minimizes mean cross-entropy plus
    ``reg_strength * (l1_ratio*||W||_1 + (1-l1_ratio)*0.5*||W||_2^2)``,
    stopping when the relative objective change drops below ``tolerance``
    or after ``max_epochs`` steps.

    A shard with a single distinct label yields a constant predictor
    flagged via ``degenerate_class`` instead of an error, so extreme
    non-IID shards remain usable coalition members.
    """
    x_raw = features.features
    y = features.labels
    c = features.num_classes
    mean = x_raw.mean(axis=0)
    scale = x_raw.std(axis=0)
    scale = np.where(scale == 0.0, 1.0, scale)

    present = np.unique(y)
    if len(present) == 1:
        return LocalLRModel(
            weights=np.zeros((x_raw.shape[1], c)), bias=np.zeros(c),
            institution_id=institution_id, train_samples=features.num_samples,
            feature_mean=mean, feature_scale=scale,
            degenerate_class=int(present[0]))

    x = (x_raw - mean) / scale
    n, d = x.shape
    l1 = config.reg_strength * config.l1_ratio
    l2 = config.reg_strength * (1.0 - config.l1_ratio)

    # 0.5 * lambda_max(X^T X)/n bounds the softmax cross-entropy curvature.
    lam_max = float(np.linalg.eigvalsh(x.T @ x).max())
    lipschitz = 0.5 * lam_max / n + l2
    step = 1.0 / max(lipschitz, 1e-12)

    w = np.zeros((d, c))
    b = np.zeros(c)
    history = []
    prev = None
    for _ in range(config.max_epochs):
        smooth, g_w, g_b = smooth_loss_grad(w, b, x, y, l2)
        loss = smooth + l1 * np.abs(w).sum()
        history.append(loss)
        if prev is not None and abs(prev - loss) <= config.tolerance * max(1.0, abs(prev)):
            break
        prev = loss
        w = _soft_threshold(w - step * g_w, step * l1)
        b = b - step * g_b

    return LocalLRModel(weights=w, bias=b, institution_id=institution_id,
                        train_samples=n, feature_mean=mean, feature_scale=scale,
                        loss_history=np.array(history))


def predict_proba(model: LocalLRModel, features_matrix: np.ndarray) -> np.ndarray:
    """Row-wise softmax of affine scores on standardized inputs."""
    x = np.asarray(features_matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.feature_dim:
        raise ValueError(
            f"feature matrix shape {x.shape} does not match model dim "
            f"({model.feature_dim})")
    if model.degenerate_class is not None:
        out = np.zeros((len(x), model.num_classes))
        out[:, model.degenerate_class] = 1.0
        return out
    scores = ((x - model.feature_mean) / model.feature_scale) @ model.weights + model.bias
    return _softmax(scores)


_LR_SCHEMA = "fedshap-lr-v1"


def save_lr(path, model: LocalLRModel) -> None:
    np.savez(path, schema=_LR_SCHEMA, weights=model.weights, bias=model.bias,
             institution_id=model.institution_id, train_samples=model.train_samples,
             feature_mean=model.feature_mean, feature_scale=model.feature_scale,
             degenerate_class=-1 if model.degenerate_class is None else model.degenerate_class,
             loss_history=model.loss_history)


def load_lr(path) -> LocalLRModel:
    with np.load(path, allow_pickle=False) as z:
        if str(z["schema"]) != _LR_SCHEMA:
            raise FormatError(f"{path}: unknown checkpoint schema {z['schema']}")
        degenerate = int(z["degenerate_class"])
        return LocalLRModel(
            weights=z["weights"], bias=z["bias"],
            institution_id=int(z["institution_id"]),
            train_samples=int(z["train_samples"]),
            feature_mean=z["feature_mean"], feature_scale=z["feature_scale"],
            degenerate_class=None if degenerate < 0 else degenerate,
            loss_history=z["loss_history"])
