"""Set-to-set embedding adaptors: BiLSTM, DeepSets, GCN and Transformer.

Each adaptor maps an ``n x d`` set of embeddings to an ``n x d`` set of
adapted embeddings. All but the BiLSTM are permutation equivariant.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import glorot
from .errors import ConfigError, DimensionError


class AdaptorKind(str, enum.Enum):
    BILSTM = "bilstm"
    DEEPSETS = "deepsets"
    GCN = "gcn"
    TRANSFORMER = "transformer"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).lower()
        if key == "feat":
            return cls.TRANSFORMER
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown adaptor kind {name!r}") from None


@dataclass
class AdaptorParams:
    """Parameters of one adaptor.

    ``tensors`` maps parameter names to leaf Nodes (insertion order is the
    canonical order used by optimizers and checkpoints); ``config`` holds
    the structural hyper-parameters needed to rebuild the forward pass.
    """

    kind: AdaptorKind
    dim: int
    tensors: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def params(self):
        return list(self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self):
        return AdaptorParams(
            self.kind,
            self.dim,
            {k: nx.param(v.value.copy()) for k, v in self.tensors.items()},
            dict(self.config),
        )


def _p(arr):
    return nx.param(np.ascontiguousarray(arr, dtype=np.float64))


# ---------------------------------------------------------------- init

def init_bilstm(dim, rng):
    t = {}
    for side in ("fw", "bw"):
        t[f"{side}.wx"] = _p(glorot(dim, 4 * dim, rng))
        t[f"{side}.wh"] = _p(glorot(dim, 4 * dim, rng))
        t[f"{side}.b"] = _p(np.zeros((1, 4 * dim)))
    return AdaptorParams(AdaptorKind.BILSTM, dim, t, {})


def init_deepsets(dim, rng, hidden=None, aggregator="max"):
    if aggregator not in ("max", "sum"):
        raise ConfigError(f"aggregator must be 'max' or 'sum', got {aggregator!r}")
    hidden = hidden or 4 * dim
    t = {
        "h.w1": _p(glorot(dim, hidden, rng)),
        "h.b1": _p(np.zeros((1, hidden))),
        "h.w2": _p(glorot(hidden, dim, rng)),
        "h.b2": _p(np.zeros((1, dim))),
        "g.w1": _p(glorot(2 * dim, hidden, rng)),
        "g.b1": _p(np.zeros((1, hidden))),
        "g.w2": _p(glorot(hidden, dim, rng)),
        "g.b2": _p(np.zeros((1, dim))),
    }
    return AdaptorParams(AdaptorKind.DEEPSETS, dim, t, {"hidden": hidden, "aggregator": aggregator})


def init_gcn(dim, rng, steps=2, hidden=None, shared=False):
    if steps < 1:
        raise ConfigError("GCN needs at least one propagation step")
    if shared:
        if hidden not in (None, dim):
            raise ConfigError("a shared projection must be square (hidden == dim)")
        t = {"w": _p(glorot(dim, dim, rng))}
        hidden = dim
    else:
        hidden = hidden or 4 * dim
        sizes = [dim] + [hidden] * (steps - 1) + [dim]
        t = {f"w{k}": _p(glorot(a, b, rng)) for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))}
    return AdaptorParams(AdaptorKind.GCN, dim, t, {"steps": steps, "hidden": hidden, "shared": shared})


def init_transformer(dim, rng, heads=1, layers=1, head_dim=None, dropout=0.5):
    if heads < 1 or layers < 1:
        raise ConfigError("transformer needs heads >= 1 and layers >= 1")
    if not 0.0 <= dropout < 1.0:
        raise ConfigError("dropout must be in [0, 1)")
    head_dim = head_dim or dim
    t = {}
    for l in range(layers):
        for h in range(heads):
            for role in ("q", "k", "v"):
                t[f"l{l}.h{h}.w{role}"] = _p(glorot(dim, head_dim, rng))
        t[f"l{l}.wfc"] = _p(glorot(heads * head_dim, dim, rng))
        t[f"l{l}.bfc"] = _p(np.zeros((1, dim)))
        t[f"l{l}.ln_gain"] = _p(np.ones((1, dim)))
        t[f"l{l}.ln_bias"] = _p(np.zeros((1, dim)))
    cfg = {"heads": heads, "layers": layers, "head_dim": head_dim, "dropout": dropout}
    return AdaptorParams(AdaptorKind.TRANSFORMER, dim, t, cfg)


def init_adaptor(kind, dim, rng, **config):
    kind = AdaptorKind.parse(kind)
    builders = {
        AdaptorKind.BILSTM: init_bilstm,
        AdaptorKind.DEEPSETS: init_deepsets,
        AdaptorKind.GCN: init_gcn,
        AdaptorKind.TRANSFORMER: init_transformer,
    }
    return builders[kind](dim, rng, **config)


# ------------------------------------------------------------- forward

def _check_set(p, phi):
    phi = nx.as_node(phi)
    if phi.value.ndim != 2 or phi.value.shape[1] != p.dim:
        raise DimensionError(f"adaptor expects n x {p.dim} input, got {phi.value.shape}")
    if phi.value.shape[0] < 1:
        raise DimensionError("adaptor input set is empty")
    return phi


def adapt_bilstm(p, phi):
    """``phi + forward_hidden + backward_hidden``; depends on row order."""
    phi = _check_set(p, phi)
    n = phi.value.shape[0]
    rev = np.arange(n - 1, -1, -1)
    fw = nx.lstm(phi, p["fw.wx"], p["fw.wh"], p["fw.b"])
    bw = nx.take_rows(nx.lstm(nx.take_rows(phi, rev), p["bw.wx"], p["bw.wh"], p["bw.b"]), rev)
    return nx.add(nx.add(phi, fw), bw)


def _mlp2(x, w1, b1, w2, b2):
    return nx.add(nx.matmul(nx.relu(nx.add(nx.matmul(x, w1), b1)), w2), b2)


def adapt_deepsets(p, phi):
    """``phi_x + g([phi_x ; agg over the other rows of h(phi)])``."""
    phi = _check_set(p, phi)
    hx = _mlp2(phi, p["h.w1"], p["h.b1"], p["h.w2"], p["h.b2"])
    ctx = nx.complement_aggregate(hx, p.config.get("aggregator", "max"))
    res = _mlp2(nx.concat_cols([phi, ctx]), p["g.w1"], p["g.b1"], p["g.w2"], p["g.b2"])
    return nx.add(phi, res)


def build_normalized_adjacency(labels):
    """``D^-1/2 (A + I) D^-1/2`` with ``A_ij = 1`` iff same class (``A_ii = 1``)."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size < 1:
        raise DimensionError("labels must be a non-empty 1-D sequence")
    a = (labels[:, None] == labels[None, :]).astype(np.float64)
    a_hat = a + np.eye(labels.size)
    deg = a_hat.sum(axis=1)
    return a_hat / np.sqrt(np.outer(deg, deg))


def adapt_gcn(p, phi, labels):
    """``steps`` rounds of ``ReLU(S @ Phi @ W_t)``."""
    phi = _check_set(p, phi)
    if len(labels) != phi.value.shape[0]:
        raise DimensionError("one label per set element required")
    s = nx.const(build_normalized_adjacency(labels))
    h = phi
    for t in range(p.config["steps"]):
        w = p["w"] if p.config.get("shared") else p[f"w{t}"]
        h = nx.relu(nx.matmul(nx.matmul(s, h), w))
    return h


def attention_scores(w_q, w_k, phi_q, phi_k, d):
    """Row-softmax of ``(phi_q W_Q)(phi_k W_K)^T / sqrt(d)``."""
    q = nx.matmul(phi_q, w_q)
    k = nx.matmul(phi_k, w_k)
    if q.value.shape[1] != k.value.shape[1]:
        raise DimensionError("query and key projections differ in width")
    logits = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / np.sqrt(d))
    return nx.stable_softmax_rows(logits)


def adapt_transformer(p, phi, rng=None, training=False):
    """Self-attention over the whole set (queries = keys = values).

    Per layer: every head attends, heads are concatenated and mapped back to
    ``d``; the result is dropped out (training only), added to the input and
    layer-normalized.
    """
    x = _check_set(p, phi)
    cfg = p.config
    rate = cfg.get("dropout", 0.0)
    if training and rate > 0 and rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    d = p.dim
    for l in range(cfg["layers"]):
        outs = []
        for h in range(cfg["heads"]):
            att = attention_scores(p[f"l{l}.h{h}.wq"], p[f"l{l}.h{h}.wk"], x, x, d)
            outs.append(nx.matmul(att, nx.matmul(x, p[f"l{l}.h{h}.wv"])))
        cat = outs[0] if len(outs) == 1 else nx.concat_cols(outs)
        res = nx.add(nx.matmul(cat, p[f"l{l}.wfc"]), p[f"l{l}.bfc"])
        res = nx.dropout(res, rate, rng, training)
        x = nx.layer_norm_rows(nx.add(x, res), p[f"l{l}.ln_gain"], p[f"l{l}.ln_bias"])
    return x


def adapt(p, phi, labels=None, rng=None, training=False):
    """Dispatch on ``p.kind``. ``labels`` are needed by GCN only."""
    if p.kind is AdaptorKind.BILSTM:
        return adapt_bilstm(p, phi)
    if p.kind is AdaptorKind.DEEPSETS:
        return adapt_deepsets(p, phi)
    if p.kind is AdaptorKind.GCN:
        if labels is None:
            raise ConfigError("GCN adaptation needs labels for the adjacency")
        return adapt_gcn(p, phi, labels)
    return adapt_transformer(p, phi, rng=rng, training=training)


def param_count(p):
    """Number of scalar parameters held by the adaptor."""
    return int(sum(t.value.size for t in p.tensors.values()))


def equivariance_error(p, phi, perms, labels=None):
    """Largest ``|adapt(phi[perm]) - adapt(phi)[perm]|`` over ``perms``.

    Dropout is off. ``labels`` (permuted alongside) matter for GCN only.
    """
    phi = np.asarray(phi, dtype=np.float64)
    labels = np.zeros(phi.shape[0], dtype=np.int64) if labels is None else np.asarray(labels)
    with nx.no_grad():
        base = adapt(p, phi, labels).value
        worst = 0.0
        for perm in perms:
            perm = np.asarray(perm)
            out = adapt(p, phi[perm], labels[perm]).value
            worst = max(worst, float(np.max(np.abs(out - base[perm]))))
    return worst
