"""Prototypes, similarity heads, cross-entropy and the contrastive term."""

import enum
import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
_clamped = 0


def clamp_events():
    """How many true-label probabilities have been floored at ``PROB_FLOOR``."""
    return _clamped


class SimilarityKind(str, enum.Enum):
    COSINE = "cosine"
    NEG_SQ_EUCLIDEAN = "euclidean"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).lower()
        aliases = {"cos": cls.COSINE, "neg_sq_euclidean": cls.NEG_SQ_EUCLIDEAN, "sqeuclidean": cls.NEG_SQ_EUCLIDEAN}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown similarity {name!r}") from None


DEFAULT_TEMPERATURE = {SimilarityKind.NEG_SQ_EUCLIDEAN: 1.0 / 64.0, SimilarityKind.COSINE: 1.0}


@dataclass(frozen=True)
class SimilarityHead:
    kind: SimilarityKind = SimilarityKind.NEG_SQ_EUCLIDEAN
    temperature: float = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SimilarityKind.parse(self.kind))
        if self.temperature is None:
            object.__setattr__(self, "temperature", DEFAULT_TEMPERATURE[self.kind])
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")


def compute_prototypes(embeddings, labels, n_way=None):
    """Per-class mean of ``embeddings``; row k is the center of class k."""
    labels = np.asarray(labels, dtype=np.int64)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    counts = np.bincount(labels, minlength=n_way)
    if counts.shape[0] != n_way or np.any(counts == 0):
        raise ContractError("every class needs at least one instance")
    avg = np.zeros((n_way, labels.size))
    avg[labels, np.arange(labels.size)] = 1.0
    avg /= counts[:, None]
    return nx.matmul(nx.const(avg), nx.as_node(embeddings))


def logits(head, query, prototypes):
    """``temperature * sim(query_i, prototype_j)``."""
    if head.kind is SimilarityKind.NEG_SQ_EUCLIDEAN:
        return nx.scale(nx.sq_dists(query, prototypes), -head.temperature)
    qn = nx.l2_normalize_rows(query)
    pn = nx.l2_normalize_rows(prototypes)
    return nx.scale(nx.matmul(qn, nx.transpose(pn)), head.temperature)


def predict(head, query, prototypes):
    """Class probabilities, one row per query."""
    return nx.stable_softmax_rows(logits(head, query, prototypes))


def cross_entropy(pred, labels):
    """Mean negative log-probability of the true labels."""
    global _clamped
    pred = nx.as_node(pred)
    labels = np.asarray(labels, dtype=np.int64)
    true = nx.pick(pred, labels)
    low = int(np.sum(true.value < PROB_FLOOR))
    if low:
        _clamped += low
        log.warning("floored %d true-label probabilities at %g", low, PROB_FLOOR)
        true = nx.clamp_min(true, PROB_FLOOR)
    return nx.scale(nx.mean_all(nx.log(true)), -1.0)


def contrastive_loss(adapt_fn, head, support_emb, support_y, query_emb, query_y, n_way):
    """Auxiliary loss on adapted embeddings of support and query together.

    The instances of each class (support and query rows) form one set that
    ``adapt_fn(set_node, labels)`` adapts; each class center is the mean of
    its adapted set. Every adapted query is then classified against all
    centers and scored with cross-entropy.
    """
    support_y = np.asarray(support_y)
    query_y = np.asarray(query_y)
    centers, adapted_queries, q_labels = [], [], []
    for c in range(n_way):
        s_rows = np.flatnonzero(support_y == c)
        q_rows = np.flatnonzero(query_y == c)
        members = nx.concat_rows([nx.take_rows(support_emb, s_rows), nx.take_rows(query_emb, q_rows)])
        adapted = adapt_fn(members, np.full(len(s_rows) + len(q_rows), c))
        centers.append(compute_prototypes(adapted, np.zeros(adapted.value.shape[0], dtype=np.int64), 1))
        if len(q_rows):
            adapted_queries.append(nx.take_rows(adapted, np.arange(len(s_rows), len(s_rows) + len(q_rows))))
            q_labels.append(np.full(len(q_rows), c))
    if not adapted_queries:
        raise ContractError("contrastive loss needs query instances")
    pred = predict(head, nx.concat_rows(adapted_queries), nx.concat_rows(centers))
    return cross_entropy(pred, np.concatenate(q_labels))
