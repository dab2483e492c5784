"""Dataset ingestion: libsvm and CSV parsing, synthetic data, splitting.

Sparse text features stay sparse and untouched; dense features can be
standardized with statistics taken from the train split only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Dataset",
    "ThreeWaySplit",
    "ParseError",
    "parse_libsvm",
    "serialize_libsvm",
    "parse_csv",
    "standardize_features",
    "synth_classification",
    "synth_regression",
    "synth_multiclass",
    "split_three",
]

VARIANCE_FLOOR = 1e-12


class ParseError(ValueError):
    def __init__(self, line: int, column: int, reason: str):
        super().__init__(f"line {line}, column {column}: {reason}")
        self.line = line
        self.column = column
        self.reason = reason


@dataclass
class Dataset:
    """Feature matrix (dense ndarray or CSR) plus aligned targets."""

    features: np.ndarray | sp.csr_matrix
    targets: np.ndarray
    feature_count: int

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=float)
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("row count and target length disagree")
        if self.features.shape[1] != self.feature_count:
            raise ValueError("feature_count does not match the matrix width")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def equals(self, other: "Dataset") -> bool:
        if self.feature_count != other.feature_count:
            return False
        if not np.array_equal(self.targets, other.targets):
            return False
        a, b = self.features, other.features
        if sp.issparse(a) != sp.issparse(b):
            return False
        if sp.issparse(a):
            return (a != b).nnz == 0
        return np.array_equal(a, b)


@dataclass(frozen=True)
class ThreeWaySplit:
    """Disjoint train/test/validation index sets covering 0..n-1."""

    train: np.ndarray
    test: np.ndarray
    validation: np.ndarray
    seed: int


def _iter_lines(source):
    if isinstance(source, str):
        return source.splitlines()
    return source


def parse_libsvm(source, n_features: int | None = None) -> Dataset:
    """Parse "label idx:val ..." lines (1-based, strictly ascending indices).

    The width defaults to the largest index seen; pass n_features to pin
    it (so train/test files with different max indices align).
    """
    data: list[float] = []
    indices: list[int] = []
    indptr = [0]
    labels: list[float] = []
    max_index = 0

    for lineno, raw in enumerate(_iter_lines(source), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        tokens = line.split()
        col = line.index(tokens[0]) + 1
        try:
            labels.append(float(tokens[0]))
        except ValueError:
            raise ParseError(lineno, col, f"bad label {tokens[0]!r}") from None
        prev_index = 0
        pos = col - 1 + len(tokens[0])
        for token in tokens[1:]:
            pos = line.index(token, pos)
            col = pos + 1
            pos += len(token)
            idx_str, sep, val_str = token.partition(":")
            if not sep:
                raise ParseError(lineno, col, f"expected idx:val, got {token!r}")
            try:
                idx = int(idx_str)
            except ValueError:
                raise ParseError(lineno, col, f"bad feature index {idx_str!r}") from None
            if idx < 1:
                raise ParseError(lineno, col, f"feature index {idx} < 1")
            if idx <= prev_index:
                raise ParseError(
                    lineno, col, f"feature index {idx} not ascending (after {prev_index})"
                )
            try:
                val = float(val_str)
            except ValueError:
                raise ParseError(lineno, col, f"bad feature value {val_str!r}") from None
            prev_index = idx
            indices.append(idx - 1)
            data.append(val)
            max_index = max(max_index, idx)
        indptr.append(len(indices))

    width = max_index if n_features is None else n_features
    if n_features is not None and max_index > n_features:
        raise ParseError(0, 0, f"index {max_index} exceeds declared width {n_features}")
    matrix = sp.csr_matrix(
        (np.array(data), np.array(indices, dtype=np.int32), np.array(indptr)),
        shape=(len(labels), width),
    )
    return Dataset(features=matrix, targets=np.array(labels), feature_count=width)


def serialize_libsvm(dataset: Dataset) -> str:
    """Canonical libsvm text; parse_libsvm(serialize_libsvm(d)) equals d."""
    features = dataset.features
    if not sp.issparse(features):
        features = sp.csr_matrix(features)
    features = features.tocsr()
    lines = []
    for i in range(dataset.n_samples):
        start, end = features.indptr[i], features.indptr[i + 1]
        parts = [repr(float(dataset.targets[i]))]
        parts.extend(
            f"{features.indices[j] + 1}:{features.data[j]!r}"
            for j in range(start, end)
        )
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_csv(source, target_column: int) -> Dataset:
    """Numeric CSV to a dense Dataset; a non-numeric first row is a header.

    Returns raw (unstandardized) features; run standardize_features with
    the train indices after splitting.
    """
    rows: list[list[float]] = []
    width = None
    for lineno, raw in enumerate(_iter_lines(source), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        cells = line.split(",")
        if width is None:
            try:
                rows.append([float(c) for c in cells])
                width = len(cells)
            except ValueError:
                width = len(cells)  # header row
            continue
        if len(cells) != width:
            raise ParseError(lineno, 1, f"expected {width} cells, got {len(cells)}")
        parsed = []
        for colno, cell in enumerate(cells, start=1):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise ParseError(lineno, colno, f"non-numeric cell {cell!r}") from None
        rows.append(parsed)

    if not rows:
        raise ParseError(0, 0, "no data rows")
    table = np.asarray(rows, dtype=float)
    if not 0 <= target_column < table.shape[1]:
        raise ParseError(0, 0, f"target column {target_column} out of range")
    targets = table[:, target_column]
    features = np.delete(table, target_column, axis=1)
    return Dataset(
        features=features, targets=targets, feature_count=features.shape[1]
    )


def standardize_features(features: np.ndarray, train_idx) -> np.ndarray:
    """Zero-mean/unit-variance columns, statistics from the train rows only."""
    if sp.issparse(features):
        raise TypeError("standardization is for dense features; sparse stay as-is")
    features = np.asarray(features, dtype=float)
    train_rows = features[np.asarray(train_idx)]
    mean = train_rows.mean(axis=0)
    var = train_rows.var(axis=0)
    scale = np.sqrt(np.maximum(var, VARIANCE_FLOOR))
    return (features - mean) / scale


def synth_classification(n: int, p: int, seed: int) -> Dataset:
    """Two gaussian blobs at +-0.5 with unit covariance, labels +-1."""
    rng = np.random.default_rng(seed)
    labels = rng.choice([-1.0, 1.0], size=n)
    features = 0.5 * labels[:, None] + rng.standard_normal((n, p))
    return Dataset(features=features, targets=labels, feature_count=p)


def synth_regression(n: int, p: int, noise: float, seed: int) -> Dataset:
    """Linear targets X w* + gaussian noise; w* drawn once from the seed."""
    rng = np.random.default_rng(seed)
    w_star = rng.standard_normal(p)
    features = rng.standard_normal((n, p))
    targets = features @ w_star + noise * rng.standard_normal(n)
    return Dataset(features=features, targets=targets, feature_count=p)


def synth_multiclass(n: int, p: int, n_classes: int, seed: int) -> Dataset:
    """K gaussian blobs with seeded means; targets are class indices 0..K-1."""
    rng = np.random.default_rng(seed)
    means = 1.5 * rng.standard_normal((n_classes, p))
    labels = rng.integers(0, n_classes, size=n)
    features = means[labels] + rng.standard_normal((n, p))
    return Dataset(features=features, targets=labels.astype(float), feature_count=p)


def split_three(dataset_or_n, seed: int) -> ThreeWaySplit:
    """Seeded permutation split into near-equal thirds (remainder forward)."""
    n = dataset_or_n if isinstance(dataset_or_n, int) else dataset_or_n.n_samples
    if n < 3:
        raise ValueError("need at least 3 samples to split three ways")
    perm = np.random.default_rng(seed).permutation(n)
    base, rem = divmod(n, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    bounds = np.cumsum([0] + sizes)
    parts = [np.sort(perm[bounds[i] : bounds[i + 1]]) for i in range(3)]
    return ThreeWaySplit(
        train=parts[0], test=parts[1], validation=parts[2], seed=seed
    )
