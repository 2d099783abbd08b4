"""The few-shot classifier: backbone + optional set adaptor + similarity head."""

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .adaptors import AdaptorKind, adapt
from .backbone import BackboneParams, embed
from .classify import SimilarityHead, compute_prototypes, logits

PRE_AVG = "pre"
POST_AVG = "post"


@dataclass
class FewShotModel:
    """``adaptor=None`` gives the plain prototypical-network baseline.

    ``prototype_position`` chooses whether same-class support embeddings are
    averaged before (``"pre"``) or after (``"post"``) adaptation. Queries are
    never adapted in the inductive setting.
    """

    backbone: BackboneParams
    adaptor: object = None
    head: SimilarityHead = SimilarityHead()
    prototype_position: str = PRE_AVG

    @property
    def name(self):
        return "protonet" if self.adaptor is None else self.adaptor.kind.value

    def params(self):
        ps = self.backbone.params()
        if self.adaptor is not None:
            ps = ps + self.adaptor.params()
        return ps

    def lr_scales(self, backbone_scale):
        n_bb = len(self.backbone.params())
        return [backbone_scale] * n_bb + [1.0] * (len(self.params()) - n_bb)

    def without_adaptor(self):
        """Same backbone and head, prototypes built from raw embeddings."""
        return replace(self, adaptor=None)

    def copy(self):
        return replace(
            self,
            backbone=self.backbone.copy(),
            adaptor=None if self.adaptor is None else self.adaptor.copy(),
        )

    # ---------------------------------------------------------------- forward

    def embed(self, x):
        return embed(self.backbone, x)

    def adapt_set(self, phi, labels, rng=None, training=False):
        if self.adaptor is None:
            return phi
        return adapt(self.adaptor, phi, labels=labels, rng=rng, training=training)

    def prototypes(self, support_emb, support_y, n_way, rng=None, training=False):
        if self.prototype_position == PRE_AVG:
            centers = compute_prototypes(support_emb, support_y, n_way)
            return self.adapt_set(centers, np.arange(n_way), rng, training)
        adapted = self.adapt_set(support_emb, support_y, rng, training)
        return compute_prototypes(adapted, support_y, n_way)

    def episode_logits(self, episode, rng=None, training=False):
        s = self.embed(episode.support_x)
        q = self.embed(episode.query_x)
        protos = self.prototypes(s, episode.support_y, episode.n_way, rng, training)
        return logits(self.head, q, protos)

    def predict_episode(self, episode, rng=None):
        """Predicted class index for every query row (ties -> lowest index)."""
        with nx.no_grad():
            return np.argmax(self.episode_logits(episode, rng).value, axis=1)

    def generalized_logits(self, test_emb, seen_protos, unseen_protos):
        """Scores over seen classes (first columns) then unseen classes."""
        with nx.no_grad():
            both = np.concatenate([seen_protos, unseen_protos], axis=0)
            return logits(self.head, test_emb, both).value

    @property
    def is_transformer(self):
        return self.adaptor is not None and self.adaptor.kind is AdaptorKind.TRANSFORMER
