import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix, issparse
from sklearn.datasets import dump_svmlight_file, load_svmlight_file
from sklearn.model_selection import train_test_split

from helpers import SimulationError

logger = logging.getLogger(__name__)

DENSE_FEATURE_LIMIT = 2048


class ParseError(SimulationError):
    """A libsvm file line could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class LabelDomainError(SimulationError):
    """Labels cannot be mapped onto {-1, +1}."""
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: csr_matrix
    labels: np.ndarray
    source: str = ""

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def max_feature_index(self) -> int:
        """Largest 1-based feature index that carries a stored value."""
        features = self.features if issparse(self.features) else csr_matrix(self.features)
        return int(features.indices.max()) + 1 if features.nnz else 0

    def subset(self, rows: np.ndarray) -> 'LabeledDataset':
        return LabeledDataset(features=self.features[rows], labels=self.labels[rows], source=self.source)

    def compact_features(self):
        """Dense rows when the feature space is small, CSR otherwise."""
        if issparse(self.features) and self.n_features <= DENSE_FEATURE_LIMIT:
            return self.features.toarray()
        return self.features


def _locate_bad_line(path: str) -> Tuple[Optional[int], str]:
    with open(path, 'r') as f:
        for number, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                float(tokens[0])
            except ValueError:
                return number, f"label '{tokens[0]}' is not a number"
            for token in tokens[1:]:
                index, sep, value = token.partition(':')
                if not sep:
                    return number, f"token '{token}' is not index:value"
                try:
                    if int(index) < 1:
                        return number, f"feature index {index} is not 1-based"
                    float(value)
                except ValueError:
                    return number, f"token '{token}' is not index:value"
    return None, "unrecognized libsvm content"


def map_labels(raw: np.ndarray) -> np.ndarray:
    """Map a binary label set onto {-1, +1}; the smaller label becomes -1."""
    values = np.unique(raw)
    if set(values.tolist()) <= {-1.0, 1.0}:
        return raw.astype(float)
    if len(values) != 2:
        raise LabelDomainError(f"Expected two classes, found labels {values[:10].tolist()}")
    logger.info(f"Mapping labels {values[0]:g} -> -1 and {values[1]:g} -> +1")
    return np.where(raw == values[1], 1.0, -1.0)


def load_libsvm(path: str, dim_hint: int = 0) -> LabeledDataset:
    """Read `label index:value ...` lines with 1-based indices."""
    try:
        features, labels = load_svmlight_file(path, n_features=dim_hint or None,
                                              dtype=np.float64, zero_based=False)
    except ValueError as e:
        line, reason = _locate_bad_line(path)
        raise ParseError(f"{path}: {reason if line else e}", line=line)
    dataset = LabeledDataset(features=features.tocsr(), labels=map_labels(labels), source=path)
    logger.info(f"Loaded {dataset.n_samples} samples from {path}, max feature index {dataset.max_feature_index}")
    return dataset


def save_libsvm(dataset: LabeledDataset, path: str) -> None:
    dump_svmlight_file(dataset.features, dataset.labels, path, zero_based=False)


def shard(dataset: LabeledDataset, n_agents: int, policy: str = 'round_robin', seed: int = 0) -> List[LabeledDataset]:
    """Split samples over agents; shard sizes differ by at most one."""
    if n_agents < 1:
        raise ValueError(f"n_agents must be >= 1, got {n_agents}")
    order = np.arange(dataset.n_samples)
    if policy == 'random_equal':
        order = np.random.default_rng(seed).permutation(dataset.n_samples)
    elif policy != 'round_robin':
        raise ValueError(f"Unknown shard policy '{policy}'")
    return [dataset.subset(np.sort(order[k::n_agents]) if policy == 'round_robin' else order[k::n_agents])
            for k in range(n_agents)]


def holdout_split(dataset: LabeledDataset, fraction: float, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    rows = np.arange(dataset.n_samples)
    train_rows, test_rows = train_test_split(rows, test_size=fraction, random_state=seed, shuffle=True)
    return dataset.subset(np.sort(train_rows)), dataset.subset(np.sort(test_rows))


def make_synthetic_svm(n_samples: int = 2000, dim: int = 5, flip: float = 0.1, seed: int = 0) -> LabeledDataset:
    """Gaussian features labelled by a random hyperplane, with a fraction of labels flipped."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=dim)
    features = rng.normal(size=(n_samples, dim))
    labels = np.where(features @ w >= 0, 1.0, -1.0)
    labels[rng.random(n_samples) < flip] *= -1
    return LabeledDataset(features=csr_matrix(features), labels=labels, source='synthetic')


def prediction_accuracy(features, labels: np.ndarray, w: np.ndarray) -> float:
    """Percentage of samples with sign(h^T w) equal to the label (ties count as +1)."""
    scores = np.asarray(features @ w).ravel()
    predicted = np.where(scores >= 0, 1.0, -1.0)
    return float(100.0 * np.mean(predicted == labels))
