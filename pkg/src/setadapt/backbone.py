"""MLP instance embedding and its supervised pre-training stage."""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import optim
from .episodes import sample_episode
from .errors import ConfigError, DimensionError


def glorot(fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class BackboneParams:
    """Layer sizes ``[D, h1, ..., d]`` with one (W, b) pair per transition.

    ReLU sits between layers; the output layer is linear. A single size
    ``[D]`` is the identity map.
    """

    sizes: list
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ConfigError("need one weight and bias per layer transition")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.value.shape != (self.sizes[k], self.sizes[k + 1]) or b.value.shape != (1, self.sizes[k + 1]):
                raise DimensionError(f"layer {k} shapes do not chain")

    @classmethod
    def init(cls, sizes, rng):
        sizes = [int(s) for s in sizes]
        ws = [nx.param(glorot(a, b, rng)) for a, b in zip(sizes[:-1], sizes[1:])]
        bs = [nx.param(np.zeros((1, b))) for b in sizes[1:]]
        return cls(sizes, ws, bs)

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def named_params(self):
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out

    def params(self):
        return list(self.named_params().values())

    def copy(self):
        return BackboneParams(
            list(self.sizes),
            [nx.param(w.value.copy()) for w in self.weights],
            [nx.param(b.value.copy()) for b in self.biases],
        )


def embed(params, batch):
    """Forward the MLP over the rows of ``batch`` (array or Node)."""
    h = nx.as_node(batch)
    if h.value.shape[1] != params.in_dim:
        raise DimensionError(f"batch has {h.value.shape[1]} features, backbone expects {params.in_dim}")
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = nx.add(nx.matmul(h, w), b)
        if k < last:
            h = nx.relu(h)
    return h


def nearest_prototype_accuracy(params, split, n_way, n_tasks, rng, n_shot=1, n_query=15):
    """Mean accuracy of a plain nearest-prototype classifier on raw embeddings."""
    accs = []
    for _ in range(n_tasks):
        ep = sample_episode(split, n_way, n_shot, n_query, rng)
        s = embed(params, ep.support_x).value
        q = embed(params, ep.query_x).value
        protos = s.reshape(n_way, n_shot, -1).mean(axis=1)
        pred = np.argmin(nx.kernels.sq_dists(q, protos), axis=1)
        accs.append(np.mean(pred == ep.query_y))
    return float(np.mean(accs))


@dataclass
class PretrainResult:
    params: BackboneParams
    history: list  # per epoch: {"epoch", "loss", "train_acc", "val_acc"}
    best_epoch: int


def pretrain_backbone(
    params,
    seen_data,
    epochs,
    optimizer_cfg=None,
    *,
    val_data=None,
    val_tasks=200,
    val_way=None,
    val_query=15,
    batch_size=64,
    seed=0,
):
    """Train ``params`` plus a softmax layer to classify every seen class.

    After each epoch the embedding is scored on ``val_tasks`` 1-shot tasks
    from ``val_data`` (``val_way`` defaults to all validation classes) and
    the best-scoring weights are kept. Epoch 0 is the untouched input, so
    the result is never worse than the starting point on validation. Without
    ``val_data`` the last epoch wins.
    """
    if seen_data.num_classes < 2:
        raise ConfigError("pre-training needs at least two seen classes")
    optimizer_cfg = optimizer_cfg or optim.AdamConfig(lr=1e-3)
    rng = np.random.default_rng(seed)
    classes = seen_data.classes
    target = np.searchsorted(classes, seen_data.labels)
    work = params.copy()
    head_w = nx.param(glorot(work.out_dim, len(classes), rng))
    head_b = nx.param(np.zeros((1, len(classes))))
    trainable = work.params() + [head_w, head_b]
    state = optim.OptimizerState.for_params([p.value for p in trainable])

    if val_data is not None:
        val_way = val_way or val_data.num_classes
        val_seed = rng.integers(2**63)

    def validate(p):
        if val_data is None:
            return float("nan")
        # same tasks every epoch so scores are comparable
        return nearest_prototype_accuracy(p, val_data, val_way, val_tasks, np.random.default_rng(val_seed), 1, val_query)

    best = work.copy()
    best_score = validate(work)
    best_epoch = 0
    history = [{"epoch": 0, "loss": None, "train_acc": None, "val_acc": best_score}]
    n = len(seen_data)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        losses, correct = [], 0
        for lo in range(0, n, batch_size):
            rows = order[lo:lo + batch_size]
            for p in trainable:
                p.zero_grad()
            logits = nx.add(nx.matmul(embed(work, seen_data.features[rows]), head_w), head_b)
            prob = nx.stable_softmax_rows(logits)
            true = nx.clamp_min(nx.pick(prob, target[rows]), 1e-12)
            loss = nx.scale(nx.mean_all(nx.log(true)), -1.0)
            nx.backward(loss)
            optim.step([p.value for p in trainable], [p.grad for p in trainable], state, optimizer_cfg)
            losses.append(loss.value[0, 0])
            correct += int(np.sum(np.argmax(logits.value, axis=1) == target[rows]))
        score = validate(work)
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_acc": correct / n,
            "val_acc": score,
        })
        if val_data is None or score > best_score:
            best, best_score, best_epoch = work.copy(), score, epoch
    return PretrainResult(best, history, best_epoch)
