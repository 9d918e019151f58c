"""Datasets, ingestion, and institutional splits.

Provides the labeled-dataset container, a synthetic Gaussian-cluster
generator, IDX and CSV loaders, and the splitter that carves out a global
test set and partitions the remainder across institutions under IID or
two label-skew regimes.

All functions are pure: inputs are treated as immutable and every source
of randomness is an explicit seed.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NumericError, SplitInfeasibleError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SCHEMES = ("iid", "label_skew_pairs", "linear_skew")

# Measured surplus may deviate from the requested fraction by at most this
# much per shard before the split is declared infeasible.
SURPLUS_TOLERANCE = 0.02


@dataclass
class LabeledDataset:
    """Feature matrix plus integer class labels in ``0..num_classes-1``."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.features):
            raise ValueError("labels must be 1-D and match the number of samples")
        if len(self.features) < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not np.isfinite(self.features).all():
            raise NumericError("feature matrix contains non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")

    @property
    def num_samples(self) -> int:
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class InstitutionShard:
    """One institution's private slice of the source dataset."""

    institution_id: int
    data: LabeledDataset


@dataclass
class SplitSpec:
    """How to carve a dataset into a global test set and institution shards."""

    scheme: str
    num_institutions: int
    test_fraction: float = 0.20
    surplus_fraction: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        if self.num_institutions < 1:
            raise ValueError("num_institutions must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if not 0.0 < self.surplus_fraction < 1.0:
            raise ValueError("surplus_fraction must lie in (0, 1)")


def generate_synthetic(num_samples: int, num_features: int, num_classes: int,
                       class_separation: float, seed: int) -> LabeledDataset:
    """Gaussian class clusters with unit within-class variance.

    Class means are drawn at random and rescaled so the minimum pairwise
    distance equals ``class_separation``. Per-class counts are as equal as
    possible (the first ``num_samples % num_classes`` classes get one extra).
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if num_samples < num_classes:
        raise ValueError("need at least one sample per class")
    if num_features < 1:
        raise ValueError("num_features must be >= 1")
    if class_separation <= 0:
        raise ValueError("class_separation must be positive")

    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, num_features))
    diffs = means[:, None, :] - means[None, :, :]
    dists = np.sqrt((diffs ** 2).sum(-1))
    min_dist = dists[np.triu_indices(num_classes, k=1)].min()
    means *= class_separation / min_dist

    base, extra = divmod(num_samples, num_classes)
    counts = [base + (1 if c < extra else 0) for c in range(num_classes)]
    feats = np.concatenate([
        means[c] + rng.standard_normal((counts[c], num_features))
        for c in range(num_classes)
    ])
    labels = np.repeat(np.arange(num_classes), counts)
    order = rng.permutation(num_samples)
    return LabeledDataset(feats[order], labels[order], num_classes)


def _read_be32(data: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(data):
        raise FormatError(f"{path}: truncated header at offset {offset}")
    return struct.unpack_from(">I", data, offset)[0]


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Load an IDX image/label file pair (big-endian MNIST format).

    Pixels are flattened and scaled to [0, 1]; labels become class ids.
    """
    with open(images_path, "rb") as f:
        img_data = f.read()
    with open(labels_path, "rb") as f:
        lbl_data = f.read()

    magic = _read_be32(img_data, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{images_path}: bad magic 0x{magic:08x} at offset 0 "
            f"(expected 0x{IDX_IMAGE_MAGIC:08x})")
    n_images = _read_be32(img_data, 4, images_path)
    rows = _read_be32(img_data, 8, images_path)
    cols = _read_be32(img_data, 12, images_path)
    expected = 16 + n_images * rows * cols
    if len(img_data) < expected:
        raise FormatError(
            f"{images_path}: truncated pixel data, file ends at offset "
            f"{len(img_data)} but {expected} bytes expected")

    magic = _read_be32(lbl_data, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(
            f"{labels_path}: bad magic 0x{magic:08x} at offset 0 "
            f"(expected 0x{IDX_LABEL_MAGIC:08x})")
    n_labels = _read_be32(lbl_data, 4, labels_path)
    if len(lbl_data) < 8 + n_labels:
        raise FormatError(
            f"{labels_path}: truncated label data, file ends at offset "
            f"{len(lbl_data)} but {8 + n_labels} bytes expected")
    if n_images != n_labels:
        raise FormatError(
            f"count mismatch: {images_path} holds {n_images} images but "
            f"{labels_path} holds {n_labels} labels")

    pixels = np.frombuffer(img_data, dtype=np.uint8, count=n_images * rows * cols,
                           offset=16)
    features = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_data, dtype=np.uint8, count=n_labels, offset=8)
    labels = labels.astype(np.int64)
    return LabeledDataset(features, labels, int(labels.max()) + 1)


def load_csv(path: str, label_column: str) -> tuple[LabeledDataset, list[str]]:
    """Load a headered CSV; all non-label columns must be numeric.

    Labels are re-encoded to contiguous 0-based ids in first-appearance
    order; the original label strings are returned alongside the dataset.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, header row expected") from None
        if label_column not in header:
            raise ValueError(f"label column {label_column!r} not found in header {header}")
        label_idx = header.index(label_column)
        feature_cols = [i for i in range(len(header)) if i != label_idx]

        rows: list[list[float]] = []
        raw_labels: list[str] = []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: row {row_num} has {len(row)} cells, expected {len(header)}")
            vals = []
            for i in feature_cols:
                try:
                    vals.append(float(row[i]))
                except ValueError:
                    raise FormatError(
                        f"{path}: non-numeric value {row[i]!r} at row {row_num}, "
                        f"column {header[i]!r}") from None
            rows.append(vals)
            raw_labels.append(row[label_idx])

    if not rows:
        raise FormatError(f"{path}: no data rows")
    mapping: list[str] = []
    seen: dict[str, int] = {}
    labels = np.empty(len(raw_labels), dtype=np.int64)
    for i, lbl in enumerate(raw_labels):
        if lbl not in seen:
            seen[lbl] = len(mapping)
            mapping.append(lbl)
        labels[i] = seen[lbl]
    dataset = LabeledDataset(np.asarray(rows, dtype=np.float64), labels, len(mapping))
    return dataset, mapping


def _stratified_test_indices(labels: np.ndarray, num_classes: int,
                             test_fraction: float, rng) -> np.ndarray:
    """Largest-remainder stratified sample; per-class counts within +-1 of exact."""
    total = int(round(test_fraction * len(labels)))
    counts = np.bincount(labels, minlength=num_classes)
    quotas = test_fraction * counts
    take = np.floor(quotas).astype(int)
    remainder = total - take.sum()
    if remainder > 0:
        order = np.argsort(-(quotas - take), kind="stable")
        take[order[:remainder]] += 1
    elif remainder < 0:
        order = np.argsort(quotas - take, kind="stable")
        give = 0
        for c in order:
            if give == -remainder:
                break
            if take[c] > 0:
                take[c] -= 1
                give += 1

    picked = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        pool = pool[rng.permutation(len(pool))]
        picked.append(pool[:take[c]])
    return np.concatenate(picked)


def _shard_quotas(total: int, n: int) -> np.ndarray:
    base, extra = divmod(total, n)
    return np.array([base + (1 if k < extra else 0) for k in range(n)], dtype=int)


def _largest_remainder_column(weights: np.ndarray, total: int) -> np.ndarray:
    """Round nonnegative weights to integers summing to ``total``."""
    if weights.sum() <= 0:
        out = np.zeros(len(weights), dtype=int)
        out[0] = total
        return out
    scaled = weights * (total / weights.sum())
    out = np.floor(scaled).astype(int)
    short = total - out.sum()
    order = np.argsort(-(scaled - out), kind="stable")
    out[order[:short]] += 1
    return out


def _iid_assignment(labels: np.ndarray, num_classes: int, n: int, rng) -> list[np.ndarray]:
    """Deal samples class-by-class round-robin; one global cursor keeps both
    shard sizes and per-class counts within +-1."""
    per_shard: list[list[int]] = [[] for _ in range(n)]
    cursor = 0
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        pool = pool[rng.permutation(len(pool))]
        for idx in pool:
            per_shard[cursor % n].append(idx)
            cursor += 1
    return [np.array(sorted(s), dtype=np.int64) for s in per_shard]


def _pair_classes(k: int) -> tuple[int, int]:
    return 2 * k, 2 * k + 1


def _label_skew_counts(class_counts: np.ndarray, n: int, quotas: np.ndarray,
                       surplus: float) -> np.ndarray:
    """Target count matrix [institution x class] for the pair-surplus scheme.

    Desired rows put ``surplus`` of each shard on its own class pair and the
    remainder uniformly elsewhere; columns are then rescaled to what each
    class actually has, rounded, and repaired so row sums hit the quotas.
    """
    num_classes = len(class_counts)
    desired = np.zeros((n, num_classes))
    for k in range(n):
        a, b = _pair_classes(k)
        others = num_classes - 2
        if others > 0:
            desired[k, :] = quotas[k] * (1.0 - surplus) / others
            desired[k, a] = quotas[k] * surplus / 2.0
            desired[k, b] = quotas[k] * surplus / 2.0
        else:
            desired[k, a] = quotas[k] / 2.0
            desired[k, b] = quotas[k] / 2.0

    counts = np.zeros((n, num_classes), dtype=int)
    for c in range(num_classes):
        counts[:, c] = _largest_remainder_column(desired[:, c], int(class_counts[c]))

    # Column-wise rounding can leave row sums off the quota by a few samples;
    # move non-pair samples between institutions until rows are exact.
    row = counts.sum(axis=1)
    while True:
        over = np.flatnonzero(row > quotas)
        under = np.flatnonzero(row < quotas)
        if len(over) == 0 and len(under) == 0:
            break
        o, u = over[0], under[0]
        pair_o = set(_pair_classes(o))
        candidates = [c for c in range(num_classes) if counts[o, c] > 0 and c not in pair_o]
        if not candidates:
            candidates = [c for c in range(num_classes) if counts[o, c] > 0]
        c = max(candidates, key=lambda cc: counts[o, cc])
        counts[o, c] -= 1
        counts[u, c] += 1
        row[o] -= 1
        row[u] += 1
    return counts


def _linear_skew_counts(class_counts: np.ndarray, n: int, majority: int) -> np.ndarray:
    """Majority class proportional to 1..n, minority classes to n..1.

    Rounding residues go to the highest-index institution for the majority
    class and to the lowest-index one for minorities, keeping totals exact.
    """
    num_classes = len(class_counts)
    counts = np.zeros((n, num_classes), dtype=int)
    asc = np.arange(1, n + 1, dtype=float)
    for c in range(num_classes):
        total = int(class_counts[c])
        weights = asc if c == majority else asc[::-1]
        shares = np.floor(total * weights / weights.sum()).astype(int)
        residue = total - shares.sum()
        shares[-1 if c == majority else 0] += residue
        counts[:, c] = shares
    return counts


def _deal_by_counts(labels: np.ndarray, counts: np.ndarray, rng) -> list[np.ndarray]:
    n, num_classes = counts.shape
    per_shard: list[list[np.ndarray]] = [[] for _ in range(n)]
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        pool = pool[rng.permutation(len(pool))]
        start = 0
        for k in range(n):
            take = counts[k, c]
            per_shard[k].append(pool[start:start + take])
            start += take
    return [np.sort(np.concatenate(chunks)) for chunks in per_shard]


def split(dataset: LabeledDataset, spec: SplitSpec,
          presplit_test: LabeledDataset | None = None
          ) -> tuple[LabeledDataset, list[InstitutionShard]]:
    """Carve out a stratified global test set, then shard the rest.

    With ``presplit_test`` given (datasets shipping their own test split),
    no test extraction happens and the whole input is sharded.

    Shard index sets are pairwise disjoint and, together with the extracted
    test set, cover the source dataset exactly. Deterministic given the spec
    seed.
    """
    n = spec.num_institutions
    if spec.scheme == "label_skew_pairs" and dataset.num_classes < 2 * n:
        raise SplitInfeasibleError(
            f"label_skew_pairs needs num_classes >= 2*num_institutions "
            f"({2 * n}), dataset has {dataset.num_classes}")

    rng = np.random.default_rng(spec.seed)
    if presplit_test is None:
        test_idx = _stratified_test_indices(dataset.labels, dataset.num_classes,
                                            spec.test_fraction, rng)
        test_set = dataset.subset(np.sort(test_idx))
        train_mask = np.ones(dataset.num_samples, dtype=bool)
        train_mask[test_idx] = False
        train_idx = np.flatnonzero(train_mask)
    else:
        test_set = presplit_test
        train_idx = np.arange(dataset.num_samples)

    train_labels = dataset.labels[train_idx]
    class_counts = np.bincount(train_labels, minlength=dataset.num_classes)
    if spec.scheme != "iid" and (class_counts == 0).any():
        empty = int(np.flatnonzero(class_counts == 0)[0])
        raise SplitInfeasibleError(
            f"class {empty} has no training samples after the test split")
    quotas = _shard_quotas(len(train_idx), n)
    if (quotas == 0).any():
        raise SplitInfeasibleError("fewer training samples than institutions")

    if spec.scheme == "iid":
        local = _iid_assignment(train_labels, dataset.num_classes, n, rng)
    elif spec.scheme == "label_skew_pairs":
        counts = _label_skew_counts(class_counts, n, quotas, spec.surplus_fraction)
        for k in range(n):
            a, b = _pair_classes(k)
            measured = (counts[k, a] + counts[k, b]) / quotas[k]
            if abs(measured - spec.surplus_fraction) > SURPLUS_TOLERANCE:
                binding = a if class_counts[a] <= class_counts[b] else b
                raise SplitInfeasibleError(
                    f"institution {k} can only reach a surplus fraction of "
                    f"{measured:.3f} (target {spec.surplus_fraction}); class "
                    f"{binding} has too few samples")
        local = _deal_by_counts(train_labels, counts, rng)
    else:  # linear_skew
        majority = int(np.argmax(class_counts))
        counts = _linear_skew_counts(class_counts, n, majority)
        local = _deal_by_counts(train_labels, counts, rng)

    shards = [InstitutionShard(k, dataset.subset(train_idx[idx]))
              for k, idx in enumerate(local)]
    return test_set, shards


def save_dataset(path, dataset: LabeledDataset) -> None:
    np.savez(path, schema="fedshap-dataset-v1", features=dataset.features,
             labels=dataset.labels, num_classes=dataset.num_classes)


def load_dataset(path) -> LabeledDataset:
    with np.load(path, allow_pickle=False) as z:
        if str(z["schema"]) != "fedshap-dataset-v1":
            raise FormatError(f"{path}: unknown dataset schema {z['schema']}")
        return LabeledDataset(z["features"], z["labels"], int(z["num_classes"]))


def save_shard(path, shard: InstitutionShard) -> None:
    np.savez(path, schema="fedshap-shard-v1", institution_id=shard.institution_id,
             features=shard.data.features, labels=shard.data.labels,
             num_classes=shard.data.num_classes)


def load_shard(path) -> InstitutionShard:
    with np.load(path, allow_pickle=False) as z:
        if str(z["schema"]) != "fedshap-shard-v1":
            raise FormatError(f"{path}: unknown shard schema {z['schema']}")
        data = LabeledDataset(z["features"], z["labels"], int(z["num_classes"]))
        return InstitutionShard(int(z["institution_id"]), data)
