"""Coalition utilities and Shapley valuation.

Coalitions are n-bit integer masks (bit i set = institution i is a member).
A coalition's model is the softmax-averaging ensemble of its members'
logistic-regression proxies; its utility is a performance score of that
ensemble on the global test set. The empty coalition has utility 0 by
definition (an empty ensemble has no prediction).

Valuation methods:

* ``safe_shapley``       - exact values over all 2^n ensemble utilities
* ``exact_shapley_retrain`` - the expensive oracle: one federated training
  run per coalition
* ``tmc_shapley``        - truncated Monte Carlo permutation sampling
* ``permutation_shapley_exact`` - brute-force enumeration of all n!
  permutations, kept as an independent cross-check of the combinatorial form

Utility evaluations over distinct coalitions are pure and independent;
``complete_utility_table`` optionally fans them out over worker processes.
Every averaging path (single query, full table, any worker) funnels through
the same member-select + left-fold reduction, so cached values are
bit-identical to recomputation regardless of parallelism.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from multiprocessing import get_context

import numpy as np
from scipy.stats import rankdata

from . import fedsim
from .data import InstitutionShard, LabeledDataset
from .errors import CapacityError, FormatError, NumericError
from .fedsim import FedConfig
from .localmodel import LocalLRModel, LRConfig, predict_proba
from .seeding import derive_seed

METHODS = ("exact_ensemble", "exact_retrain", "tmc", "permutation_exact")
METRICS = ("accuracy", "macro_auroc")

MAX_ENSEMBLE_INSTITUTIONS = 25
MAX_RETRAIN_INSTITUTIONS = 8
MAX_PERMUTATION_INSTITUTIONS = 10


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean top-1 agreement; argmax ties break toward the lowest class index."""
    return float((probs.argmax(axis=1) == labels).mean())


def macro_auroc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of one-vs-rest AUROC per class, midrank tie handling.

    Classes absent from the labels are skipped with a warning.
    """
    num_classes = probs.shape[1]
    aucs = []
    for c in range(num_classes):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = len(labels) - n_pos
        if n_pos == 0 or n_neg == 0:
            warnings.warn(f"class {c} has no positives or no negatives in the "
                          f"test set; skipped in macro AUROC", stacklevel=2)
            continue
        ranks = rankdata(probs[:, c])
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        aucs.append(auc)
    if not aucs:
        raise NumericError("macro AUROC undefined: no class has both positives "
                           "and negatives")
    return float(np.mean(aucs))


_METRIC_FNS = {"accuracy": accuracy, "macro_auroc": macro_auroc}


def _check_metric(metric: str) -> None:
    if metric not in _METRIC_FNS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")


@dataclass
class UtilityTable:
    """Memoized map from coalition bitmask to utility score.

    ``values`` is indexed by bitmask; missing entries are NaN. The empty
    coalition is pinned at 0.
    """

    n: int
    metric: str
    values: np.ndarray

    def __post_init__(self):
        _check_metric(self.metric)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (1 << self.n,):
            raise ValueError(f"values must have length 2^{self.n}")
        if self.values[0] != 0.0:
            raise ValueError("empty-coalition utility must be 0")
        stored = self.values[~np.isnan(self.values)]
        if ((stored < 0) | (stored > 1)).any():
            raise ValueError("stored scores must lie in [0, 1]")

    @classmethod
    def from_dict(cls, n: int, metric: str, entries: dict[int, float]) -> "UtilityTable":
        values = np.full(1 << n, np.nan)
        values[0] = 0.0
        for mask, score in entries.items():
            values[mask] = score
        return cls(n, metric, values)

    def value(self, mask: int) -> float:
        return float(self.values[mask])

    def is_complete(self) -> bool:
        return not np.isnan(self.values).any()

    def missing_mask(self) -> int | None:
        missing = np.flatnonzero(np.isnan(self.values))
        return int(missing[0]) if len(missing) else None

    def grand_value(self) -> float:
        return float(self.values[(1 << self.n) - 1])

    def to_json(self) -> str:
        entries = {str(i): float(v) for i, v in enumerate(self.values)
                   if not math.isnan(v)}
        return json.dumps({"schema": "fedshap-utility-table-v1", "n": self.n,
                           "metric": self.metric, "values": entries},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "UtilityTable":
        obj = json.loads(text)
        if obj.get("schema") != "fedshap-utility-table-v1":
            raise FormatError(f"unknown utility-table schema {obj.get('schema')!r}")
        entries = {int(k): float(v) for k, v in obj["values"].items()}
        return cls.from_dict(int(obj["n"]), obj["metric"], entries)


@dataclass
class ShapleyVector:
    """Per-institution valuation plus provenance metadata."""

    values: np.ndarray
    method: str
    metric: str
    seed: int = 0
    permutations_used: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("values must be a vector")
        if not np.isfinite(self.values).all():
            raise ValueError("Shapley values must be finite")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        _check_metric(self.metric)

    def __len__(self) -> int:
        return len(self.values)

    def to_json(self) -> str:
        return json.dumps({"schema": "fedshap-shapley-v1",
                           "values": [float(v) for v in self.values],
                           "method": self.method, "metric": self.metric,
                           "seed": self.seed,
                           "permutations_used": self.permutations_used},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ShapleyVector":
        obj = json.loads(text)
        if obj.get("schema") != "fedshap-shapley-v1":
            raise FormatError(f"unknown shapley-vector schema {obj.get('schema')!r}")
        return cls(np.array(obj["values"], dtype=np.float64), obj["method"],
                   obj["metric"], int(obj["seed"]), obj["permutations_used"])


def coalition_members(mask: int, n: int) -> list[int]:
    return [i for i in range(n) if mask >> i & 1]


def _mean_member_probs(stack: np.ndarray, members: list[int]) -> np.ndarray:
    """Canonical ensemble average: ascending-member left fold, then divide.

    Single source of truth for every coalition evaluation so that repeated
    computation of the same coalition is bit-identical.
    """
    return np.add.reduce(stack[members], axis=0) / len(members)


def ensemble_predict(models: list[LocalLRModel], features_matrix: np.ndarray) -> np.ndarray:
    """Unweighted mean of the member models' softmax outputs."""
    if not models:
        raise ValueError("ensemble_predict needs at least one model")
    stack = np.stack([predict_proba(m, features_matrix) for m in models])
    return _mean_member_probs(stack, list(range(len(models))))


class _CoalitionEvaluator:
    """Precomputed per-model probabilities; evaluates any coalition bitmask."""

    def __init__(self, models: list[LocalLRModel], test_set: LabeledDataset, metric: str):
        _check_metric(metric)
        if not models:
            raise ValueError("need at least one model")
        dims = {m.feature_dim for m in models}
        if len(dims) != 1:
            raise ValueError(f"models disagree on feature dim: {sorted(dims)}")
        self.n = len(models)
        self.metric = metric
        self.metric_fn = _METRIC_FNS[metric]
        self.labels = test_set.labels
        self.stack = np.stack([predict_proba(m, test_set.features) for m in models])

    def __call__(self, mask: int) -> float:
        if mask == 0:
            return 0.0
        members = coalition_members(mask, self.n)
        probs = _mean_member_probs(self.stack, members)
        return self.metric_fn(probs, self.labels)


def utility(coalition: int, models: list[LocalLRModel], test_set: LabeledDataset,
            metric: str) -> float:
    """Score of the coalition's ensemble on the test set; 0 for the empty one."""
    n = len(models)
    if not 0 <= coalition < (1 << n):
        raise ValueError(f"coalition {coalition} out of range for n={n}")
    if coalition == 0:
        return 0.0
    return _CoalitionEvaluator(models, test_set, metric)(coalition)


_WORKER_EVAL: _CoalitionEvaluator | None = None


def _worker_init(stack, labels, metric, n):
    global _WORKER_EVAL
    ev = _CoalitionEvaluator.__new__(_CoalitionEvaluator)
    ev.n = n
    ev.metric = metric
    ev.metric_fn = _METRIC_FNS[metric]
    ev.labels = labels
    ev.stack = stack
    _WORKER_EVAL = ev


def _worker_eval_range(bounds: tuple[int, int]) -> np.ndarray:
    start, stop = bounds
    return np.array([_WORKER_EVAL(mask) for mask in range(start, stop)])


def complete_utility_table(models: list[LocalLRModel], test_set: LabeledDataset,
                           metric: str, parallelism: int = 1,
                           max_institutions: int = MAX_ENSEMBLE_INSTITUTIONS
                           ) -> UtilityTable:
    """Evaluate every one of the 2^n coalitions exactly once.

    Deterministic regardless of evaluation order or worker count: each
    entry depends only on the precomputed per-model probabilities.
    """
    n = len(models)
    if n > max_institutions:
        raise CapacityError(
            f"{n} institutions would need 2^{n} ensemble evaluations and a "
            f"2^{n} x 8 byte table (cap {max_institutions}); use tmc_shapley "
            f"for an approximation")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    evaluator = _CoalitionEvaluator(models, test_set, metric)
    size = 1 << n
    values = np.zeros(size)

    if parallelism == 1 or size < 4096:
        for mask in range(1, size):
            values[mask] = evaluator(mask)
        return UtilityTable(n, metric, values)

    chunk = 2048
    bounds = [(s, min(s + chunk, size)) for s in range(1, size, chunk)]
    ctx = get_context("fork")
    with ProcessPoolExecutor(max_workers=parallelism, mp_context=ctx,
                             initializer=_worker_init,
                             initargs=(evaluator.stack, evaluator.labels, metric, n)
                             ) as pool:
        for (start, stop), part in zip(bounds, pool.map(_worker_eval_range, bounds)):
            values[start:stop] = part
    return UtilityTable(n, metric, values)


def _binomials(n: int) -> np.ndarray:
    """Pascal-recurrence row C(n, 0..n) in float64 (exact for n <= 25)."""
    row = np.zeros(n + 1)
    row[0] = 1.0
    for i in range(1, n + 1):
        row[1:i + 1] = row[1:i + 1] + row[0:i]
    return row


def _popcounts(size: int, n: int) -> np.ndarray:
    masks = np.arange(size, dtype=np.int64)
    counts = np.zeros(size, dtype=np.int64)
    for b in range(n):
        counts += (masks >> b) & 1
    return counts


def _require_complete(table: UtilityTable) -> None:
    missing = table.missing_mask()
    if missing is not None:
        raise ValueError(f"utility table is incomplete: no entry for bitmask {missing}")


def exact_shapley(table: UtilityTable, method: str = "exact_ensemble",
                  seed: int = 0) -> ShapleyVector:
    """Combinatorial Shapley values from a complete utility table.

    phi_i = sum over coalitions S excluding i of
    (v(S + i) - v(S)) / (n * C(n-1, |S|)), all in 64-bit arithmetic with
    binomials from the Pascal recurrence (no factorials).
    """
    _require_complete(table)
    n = table.n
    size = 1 << n
    weights_by_size = 1.0 / (n * _binomials(n - 1))
    pops = _popcounts(size, n)
    masks = np.arange(size, dtype=np.int64)
    v = table.values

    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        gains = v[without | bit] - v[without]
        phi[i] = np.sum(weights_by_size[pops[without]] * gains)
    return ShapleyVector(phi, method, table.metric, seed)


def permutation_shapley_exact(table: UtilityTable,
                              max_institutions: int = MAX_PERMUTATION_INSTITUTIONS,
                              seed: int = 0) -> ShapleyVector:
    """Brute-force Shapley: average marginal contribution over all n! orderings.

    Independent of the combinatorial form; used as its cross-check oracle.
    """
    _require_complete(table)
    n = table.n
    if n > max_institutions:
        raise CapacityError(f"enumerating {n}! permutations exceeds the cap "
                            f"({max_institutions})")
    v = table.values
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    k = len(perms)
    prefix = np.zeros((k, n + 1), dtype=np.int64)
    for j in range(n):
        prefix[:, j + 1] = prefix[:, j] | (1 << perms[:, j])
    marginals = v[prefix[:, 1:]] - v[prefix[:, :-1]]

    per_player = np.zeros((n, k))
    rows = np.arange(k)
    for j in range(n):
        per_player[perms[:, j], rows] = marginals[:, j]
    phi = per_player.sum(axis=1) / k
    return ShapleyVector(phi, "permutation_exact", table.metric, seed)


def safe_shapley(models: list[LocalLRModel], test_set: LabeledDataset, metric: str,
                 parallelism: int = 1, seed: int = 0,
                 max_institutions: int = MAX_ENSEMBLE_INSTITUTIONS) -> ShapleyVector:
    """Exact Shapley values over the full table of ensemble utilities."""
    table = complete_utility_table(models, test_set, metric, parallelism,
                                   max_institutions)
    return exact_shapley(table, method="exact_ensemble", seed=seed)


def retrain_utility_table(shards: list[InstitutionShard], test_set: LabeledDataset,
                          fed_config: FedConfig, metric: str,
                          max_institutions: int = MAX_RETRAIN_INSTITUTIONS
                          ) -> UtilityTable:
    """Utility of every coalition as a federated model trained from scratch.

    Each coalition's run is seeded independently from (seed, mask).
    """
    _check_metric(metric)
    n = len(shards)
    if n > max_institutions:
        raise CapacityError(
            f"exact retraining needs a full federated run per coalition: "
            f"2^{n} runs for {n} institutions is past the cap "
            f"({max_institutions}) and grows without bound; use the ensemble "
            f"method or tmc_shapley instead")
    metric_fn = _METRIC_FNS[metric]
    values = np.zeros(1 << n)
    for mask in range(1, 1 << n):
        subset = [shards[i] for i in coalition_members(mask, n)]
        config = replace(fed_config, seed=derive_seed(fed_config.seed, "coalition", mask))
        model = fedsim.train_federated(subset, config)
        probs = fedsim.predict_proba(model, test_set.features)
        values[mask] = metric_fn(probs, test_set.labels)
    return UtilityTable(n, metric, values)


def exact_shapley_retrain(shards: list[InstitutionShard], test_set: LabeledDataset,
                          fed_config: FedConfig, lr_config: LRConfig | None = None,
                          metric: str = "accuracy",
                          max_institutions: int = MAX_RETRAIN_INSTITUTIONS
                          ) -> ShapleyVector:
    """The expensive oracle: retrain a federated model for every coalition.

    ``lr_config`` is accepted for interface symmetry with the other methods
    (it is echoed into run provenance by the CLI); retraining itself uses
    only the federated pipeline.
    """
    del lr_config
    table = retrain_utility_table(shards, test_set, fed_config, metric,
                                  max_institutions)
    vec = exact_shapley(table, method="exact_retrain", seed=fed_config.seed)
    return vec


def tmc_shapley(models: list[LocalLRModel], test_set: LabeledDataset, metric: str,
                truncation_tolerance: float | None = None,
                convergence_window: int = 100,
                convergence_tolerance: float = 1e-4,
                max_permutations: int | None = None,
                seed: int = 0, exhaustive: bool = False) -> ShapleyVector:
    """Truncated Monte Carlo Shapley over ensemble utilities.

    Walks random permutations accumulating marginal contributions; once the
    running coalition's utility is within ``truncation_tolerance`` of the
    grand coalition's, the rest of the permutation is recorded as zero
    marginals. Utilities are memoized across permutations. Stops when the
    largest per-institution change of the running mean over the last
    ``convergence_window`` permutations falls below
    ``convergence_tolerance``, or at ``max_permutations``.

    Defaults: truncation at 0.001 * v(N), at most 10 * 2^n permutations.

    ``exhaustive`` visits every one of the n! distinct permutations exactly
    once instead of sampling (no convergence stopping); with truncation
    disabled this reproduces the brute-force permutation values.
    """
    n = len(models)
    if truncation_tolerance is not None and truncation_tolerance < 0:
        raise ValueError("truncation_tolerance must be >= 0")
    if convergence_window < 1 or convergence_tolerance <= 0:
        raise ValueError("convergence parameters must be positive")
    if max_permutations is not None and max_permutations < 1:
        raise ValueError("max_permutations must be >= 1")
    if exhaustive and n > MAX_PERMUTATION_INSTITUTIONS:
        raise CapacityError(f"exhaustive mode enumerates {n}! permutations; "
                            f"cap is {MAX_PERMUTATION_INSTITUTIONS}")

    evaluator = _CoalitionEvaluator(models, test_set, metric)
    full = (1 << n) - 1
    memo: dict[int, float] = {0: 0.0}
    memo[full] = evaluator(full)
    v_full = memo[full]
    if truncation_tolerance is None:
        truncation_tolerance = 0.001 * v_full
    if max_permutations is None:
        max_permutations = 10 * (1 << n)

    if exhaustive:
        perm_iter = (np.array(p) for p in itertools.permutations(range(n)))
        limit = math.factorial(n)
    else:
        rng = np.random.default_rng(seed)
        perm_iter = (rng.permutation(n) for _ in itertools.count())
        limit = max_permutations

    contrib_sum = np.zeros(n)
    recent_means: list[np.ndarray] = []
    t = 0
    for perm in perm_iter:
        if t >= limit:
            break
        mask = 0
        v_prev = 0.0
        truncated = False
        contribs = np.zeros(n)
        for player in perm:
            if truncated or abs(v_full - v_prev) < truncation_tolerance:
                truncated = True
                continue
            mask |= 1 << int(player)
            v_cur = memo.get(mask)
            if v_cur is None:
                v_cur = evaluator(mask)
                memo[mask] = v_cur
            contribs[player] = v_cur - v_prev
            v_prev = v_cur
        contrib_sum += contribs
        t += 1

        if not exhaustive:
            mean = contrib_sum / t
            recent_means.append(mean)
            if len(recent_means) > convergence_window + 1:
                recent_means.pop(0)
            if len(recent_means) == convergence_window + 1:
                drift = np.abs(recent_means[-1] - recent_means[0]).max()
                if drift < convergence_tolerance:
                    break

    phi = contrib_sum / t
    return ShapleyVector(phi, "tmc", metric, seed, permutations_used=t)


def cosine_similarity(a: ShapleyVector, b: ShapleyVector) -> float:
    """Cosine of the angle between two valuation vectors, in [-1, 1]."""
    va, vb = np.asarray(a.values), np.asarray(b.values)
    if va.shape != vb.shape:
        raise ValueError(f"length mismatch: {va.shape} vs {vb.shape}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity undefined for a zero vector")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))
