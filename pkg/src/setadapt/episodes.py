"""Vector datasets, class splits and N-way M-shot episode sampling."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, SamplingError


class VectorDataset:
    """Feature rows with integer class labels.

    ``class_index`` maps each class id to the (sorted) row indices that carry
    it. Class ids need not be dense; splits keep the ids of their parent.
    """

    def __init__(self, features, labels):
        features = np.ascontiguousarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise ContractError("features must be n x D with one label per row")
        if not np.all(np.isfinite(features)):
            raise ContractError("features contain NaN or Inf")
        self.features = features
        self.labels = labels
        self.classes = np.unique(labels)
        self.class_index = {int(c): np.flatnonzero(labels == c) for c in self.classes}

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def num_classes(self):
        return len(self.classes)

    def __len__(self):
        return self.features.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, VectorDataset)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def __repr__(self):
        return f"VectorDataset(rows={len(self)}, dim={self.dim}, classes={self.num_classes})"

    def subset_classes(self, classes):
        keep = np.isin(self.labels, np.asarray(list(classes), dtype=np.int64))
        return VectorDataset(self.features[keep], self.labels[keep])

    def subset_rows(self, rows):
        rows = np.sort(np.asarray(rows, dtype=np.int64))
        return VectorDataset(self.features[rows], self.labels[rows])


@dataclass
class Episode:
    """One N-way task. Labels are remapped to ``0..N-1`` in ``classes`` order."""

    n_way: int
    n_shot: int
    n_query: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    classes: np.ndarray
    unlabeled_x: np.ndarray = None
    unlabeled_y: np.ndarray = None  # held back from models; diagnostics only
    rows: dict = field(default_factory=dict)

    @property
    def has_pool(self):
        return self.unlabeled_x is not None and len(self.unlabeled_x) > 0


def make_splits(dataset, seen_frac, val_frac, rng):
    """Partition classes into (seen, val, unseen) datasets."""
    n = dataset.num_classes
    n_seen = int(round(n * seen_frac))
    n_val = int(round(n * val_frac))
    n_unseen = n - n_seen - n_val
    if min(n_seen, n_val, n_unseen) < 1:
        raise ConfigError(f"{n} classes cannot give three non-empty splits at {seen_frac}/{val_frac}")
    order = rng.permutation(dataset.classes)
    parts = (order[:n_seen], order[n_seen:n_seen + n_val], order[n_seen + n_val:])
    return tuple(dataset.subset_classes(np.sort(p)) for p in parts)


def holdout_rows(dataset, per_class, rng):
    """Split off ``per_class`` rows of every class: returns (rest, held_out)."""
    held = []
    for c in dataset.classes:
        idx = dataset.class_index[int(c)]
        if len(idx) <= per_class:
            raise ConfigError(f"class {c} has {len(idx)} rows, cannot hold out {per_class}")
        held.append(rng.choice(idx, per_class, replace=False))
    held = np.concatenate(held)
    rest = np.setdiff1d(np.arange(len(dataset)), held)
    return dataset.subset_rows(rest), dataset.subset_rows(held)


def sample_episode(split, n_way, n_shot, n_query, rng, n_unlabeled=0):
    """Draw an episode: classes without replacement, then rows without replacement.

    Support rows are grouped by class (``n_shot`` consecutive rows each).
    ``n_unlabeled`` extra rows per class form the unlabeled pool.
    """
    if n_way < 1 or n_shot < 1 or n_query < 0 or n_unlabeled < 0:
        raise ConfigError("n_way and n_shot must be positive, counts non-negative")
    if split.num_classes < n_way:
        raise SamplingError(f"split has {split.num_classes} classes, need {n_way}")
    need = n_shot + n_query + n_unlabeled
    classes = rng.choice(split.classes, n_way, replace=False)
    sup, qry, unl = [], [], []
    for c in classes:
        idx = split.class_index[int(c)]
        if len(idx) < need:
            raise SamplingError(f"class {c} has {len(idx)} rows, need {need}")
        pick = rng.choice(idx, need, replace=False)
        sup.append(pick[:n_shot])
        qry.append(pick[n_shot:n_shot + n_query])
        unl.append(pick[n_shot + n_query:])
    sup, qry, unl = np.concatenate(sup), np.concatenate(qry), np.concatenate(unl)
    f = split.features
    return Episode(
        n_way=n_way,
        n_shot=n_shot,
        n_query=n_query,
        support_x=f[sup],
        support_y=np.repeat(np.arange(n_way), n_shot),
        query_x=f[qry],
        query_y=np.repeat(np.arange(n_way), n_query),
        classes=np.asarray(classes, dtype=np.int64),
        unlabeled_x=f[unl] if n_unlabeled else None,
        unlabeled_y=np.repeat(np.arange(n_way), n_unlabeled) if n_unlabeled else None,
        rows={"support": sup, "query": qry, "unlabeled": unl},
    )


def gen_synthetic(num_classes, per_class, dim, spread, separation, rng):
    """Isotropic Gaussian clusters.

    Class means are uniform in ``[-separation, separation]^dim``; every class
    has ``per_class`` rows with standard deviation ``spread`` per axis.
    """
    if min(num_classes, per_class, dim) < 1:
        raise ConfigError("counts must be positive")
    means = rng.uniform(-1.0, 1.0, size=(num_classes, dim)) * separation
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((num_classes * per_class, dim)) * spread
    return VectorDataset(means[labels] + noise, labels)
