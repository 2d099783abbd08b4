"""Episodic training of backbone and adaptor with the contrastive term."""

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from . import optim
from .classify import contrastive_loss, cross_entropy, predict
from .episodes import sample_episode
from .errors import ConfigError, NumericError
from .evaluation import evaluate

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_way: int = 5
    n_shot: int = 1
    n_query: int = 15
    epochs: int = 10
    episodes_per_epoch: int = 100
    lam: float = 0.1
    optimizer: object = field(default_factory=optim.AdamConfig)
    backbone_lr_scale: float = 0.1
    lr_decay: float = 0.5
    decay_every: int = 10
    val_tasks: int = 200
    val_way: int = None  # None: n_way, capped at the validation class count
    val_shot: int = 1
    val_query: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("contrastive weight must be non-negative")
        if not self.optimizer.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")

    def lr_at(self, epoch):
        return self.optimizer.lr * self.lr_decay ** ((epoch - 1) // self.decay_every)

    def to_dict(self):
        d = asdict(self)
        d["optimizer"] = {"kind": type(self.optimizer).__name__, **asdict(self.optimizer)}
        return d


def episode_loss(model, episode, lam, rng=None, training=True):
    """Cross-entropy of queries against adapted prototypes, plus ``lam`` times
    the contrastive term (skipped when ``lam == 0`` or there is no adaptor)."""
    s = model.embed(episode.support_x)
    q = model.embed(episode.query_x)
    protos = model.prototypes(s, episode.support_y, episode.n_way, rng, training)
    loss = cross_entropy(predict(model.head, q, protos), episode.query_y)
    if lam and model.adaptor is not None:

        def adapt_fn(x, labels):
            return model.adapt_set(x, labels, rng, training)

        aux = contrastive_loss(adapt_fn, model.head, s, episode.support_y, q, episode.query_y, episode.n_way)
        loss = nx.add(loss, nx.scale(aux, lam))
    return loss


@dataclass
class TrainResult:
    model: object
    history: list  # per epoch: {"epoch", "lr", "loss", "val_acc"}
    initial_val_acc: float
    best_epoch: int


def train(config, seen, val, model, log_fn=None):
    """Run ``config.epochs`` epochs of episodic training on a copy of ``model``.

    After every epoch the model is scored on ``config.val_tasks`` fixed
    validation tasks; the best-scoring weights (the untrained model counts
    as epoch 0) are returned. ``log_fn`` receives each history record.
    """
    work = model.copy()
    rng = np.random.default_rng(config.seed)
    val_seed = int(rng.integers(2**63))
    params = work.params()
    scales = work.lr_scales(config.backbone_lr_scale)
    state = optim.OptimizerState.for_params([p.value for p in params])

    val_way = config.val_way or min(config.n_way, val.num_classes)

    def validate(m):
        return evaluate(m, val, val_way, config.val_shot, config.val_query, config.val_tasks, val_seed).mean

    initial = validate(work)
    best, best_acc, best_epoch = work.copy(), initial, 0
    history = []
    for epoch in range(1, config.epochs + 1):
        opt_cfg = replace(config.optimizer, lr=config.lr_at(epoch))
        losses = []
        for it in range(config.episodes_per_epoch):
            ep = sample_episode(seen, config.n_way, config.n_shot, config.n_query, rng)
            for p in params:
                p.zero_grad()
            loss = episode_loss(work, ep, config.lam, rng, training=True)
            value = loss.value[0, 0]
            if not np.isfinite(value):
                raise NumericError(f"loss diverged at epoch {epoch}, episode {it}: {value}")
            nx.backward(loss)
            optim.step([p.value for p in params], [p.grad for p in params], state, opt_cfg, scales)
            losses.append(value)
        acc = validate(work)
        record = {"epoch": epoch, "lr": opt_cfg.lr, "loss": float(np.mean(losses)), "val_acc": acc}
        history.append(record)
        log.info("epoch %d loss %.4f val %.2f", epoch, record["loss"], acc)
        if log_fn is not None:
            log_fn(record)
        if acc > best_acc:
            best, best_acc, best_epoch = work.copy(), acc, epoch
    return TrainResult(best, history, initial, best_epoch)


def gradient_check(kind, dim, seed, n_way=3, n_shot=2, n_query=2, lam=0.1, h=1e-5):
    """Max relative error of ``episode_loss`` gradients against central
    differences, for a one-layer backbone plus a ``kind`` adaptor.

    Dropout stays on; the mask generator is re-seeded for every evaluation
    so each finite-difference probe sees the same masks.
    """
    from .adaptors import init_adaptor
    from .backbone import BackboneParams
    from .episodes import gen_synthetic
    from .model import FewShotModel

    rng = np.random.default_rng(seed)
    data = gen_synthetic(n_way, n_shot + n_query, dim, 1.0, 1.0, rng)
    episode = sample_episode(data, n_way, n_shot, n_query, rng)
    backbone = BackboneParams.init([dim, dim], rng)
    for b in backbone.biases:
        b.value[:] = rng.normal(scale=0.1, size=b.value.shape)
    model = FewShotModel(backbone, init_adaptor(kind, dim, rng))
    for t in model.adaptor.params():
        t.value += rng.normal(scale=0.05, size=t.value.shape)
    mask_seed = int(rng.integers(2**63))

    def f():
        return episode_loss(model, episode, lam, np.random.default_rng(mask_seed), training=True)

    return nx.finite_diff_check(f, model.params(), h)
