"""The twelve acceptance criteria, one test each.

Every test appends a ``[PASS]`` or ``[FAIL]`` line that pytest prints in its
terminal summary. Run this file directly to print only those lines.
"""

import functools
import itertools
import math
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from test_adaptors import jitter, scalar_transformer

from setadapt.adaptors import (
    AdaptorKind,
    adapt_gcn,
    adapt_transformer,
    attention_scores,
    build_normalized_adjacency,
    equivariance_error,
    init_adaptor,
    param_count,
)
from setadapt.backbone import BackboneParams, pretrain_backbone
from setadapt.episodes import gen_synthetic, holdout_rows, make_splits
from setadapt.evaluation import (
    _generalized_scores,
    _score_generalized,
    calibration_search,
    eval_generalized,
    eval_way_generalization,
    evaluate,
    evaluate_transductive,
)
from setadapt.io import Checkpoint, load_checkpoint, save_checkpoint
from setadapt.model import FewShotModel
from setadapt.training import TrainConfig, gradient_check, train

# synthetic benchmark: 60 classes split 30 seen / 10 val / 20 unseen so
# that 20-way tasks fit in the unseen split
BENCH = dict(classes=60, per_class=60, dim=32, spread=0.6, separation=1.0, seed=0)
TASKS = 2000
EVAL_SEED = 11


def criterion(number, text):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except Exception as exc:
                ACCEPTANCE_LINES.append(f"[FAIL] C{number:02d} {text}: {exc}")
                print(ACCEPTANCE_LINES[-1])
                raise
            line = f"[PASS] C{number:02d} {text}"
            if detail:
                line += f" ({detail})"
            ACCEPTANCE_LINES.append(f"{line} [{time.perf_counter() - t0:.1f}s]")
            print(ACCEPTANCE_LINES[-1])

        return run

    return wrap


class Bench:
    """Data, splits and the three trained models shared by criteria 5 to 9."""

    def __init__(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(BENCH["seed"])
        ds = gen_synthetic(BENCH["classes"], BENCH["per_class"], BENCH["dim"], BENCH["spread"], BENCH["separation"], rng)
        seen, self.val, self.unseen = make_splits(ds, 0.5, 0.17, rng)
        self.seen, self.heldout = holdout_rows(seen, 10, rng)
        d = BENCH["dim"]
        pre = pretrain_backbone(BackboneParams.init([d, 64, d], rng), self.seen, 10, val_data=self.val, val_tasks=100, seed=1)
        cfg = TrainConfig(epochs=10, episodes_per_epoch=100, lam=0.1, val_tasks=200, seed=3)
        self.protonet = train(TrainConfig(**{**cfg.__dict__, "lam": 0.0}), self.seen, self.val, FewShotModel(pre.params)).model
        feat = FewShotModel(pre.params, init_adaptor("feat", d, np.random.default_rng(5)))
        self.feat = train(cfg, self.seen, self.val, feat).model
        cfg20 = TrainConfig(n_way=20, epochs=1, episodes_per_epoch=20, val_tasks=50, seed=4)
        self.feat20 = train(cfg20, self.seen, self.val, feat).model
        self.build_seconds = time.perf_counter() - t0
        self._cache = {}

    def standard(self, name, model):
        if name not in self._cache:
            self._cache[name] = evaluate(model, self.unseen, 5, 1, 15, TASKS, EVAL_SEED, workers=4)
        return self._cache[name]


@pytest.fixture(scope="module")
def bench():
    return Bench()


# --------------------------------------------------------------- analytic

@criterion(1, "episode-loss gradients match finite differences for all four adaptors")
def test_c01_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for kind in AdaptorKind:
        for seed in range(3):
            worst = max(worst, gradient_check(kind, 8, seed, n_way=3, n_shot=2, n_query=2))
    secs = time.perf_counter() - t0
    assert worst <= 1e-4, f"max relative error {worst:.3e}"
    assert secs < 120, f"took {secs:.0f}s"
    return f"max rel err {worst:.2e}"


@criterion(2, "DeepSets/GCN/Transformer equivariant, BiLSTM not")
def test_c02_equivariance():
    rng = np.random.default_rng(0)
    worst = 0.0
    for kind in ("deepsets", "gcn", "transformer"):
        p = jitter(init_adaptor(kind, 8, rng), rng)
        for n, perms in ((5, list(itertools.permutations(range(5)))), (32, [rng.permutation(32) for _ in range(20)])):
            phi = rng.standard_normal((n, 8))
            labels = rng.integers(0, 3, size=n)
            err = equivariance_error(p, phi, perms, labels)
            assert err <= 1e-9, f"{kind} n={n}: {err:.2e}"
            worst = max(worst, err)
    bilstm = init_adaptor("bilstm", 8, rng)
    violation = equivariance_error(bilstm, rng.standard_normal((5, 8)), itertools.permutations(range(5)))
    assert violation > 1e-6, "BiLSTM showed no order dependence"
    return f"max deviation {worst:.1e}, BiLSTM {violation:.2f}"


@criterion(3, "transformer matches scalar-loop reference; attention rows sum to 1")
def test_c03_attention_oracle():
    worst = row_err = 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        d, n = int(rng.integers(2, 9)), int(rng.integers(1, 9))
        p = jitter(init_adaptor("feat", d, rng), rng)
        phi = rng.standard_normal((n, d))
        got = adapt_transformer(p, phi, training=False).value
        worst = max(worst, float(np.max(np.abs(got - scalar_transformer(p, phi)))))
        att = attention_scores(p["l0.h0.wq"], p["l0.h0.wk"], phi, phi, d).value
        row_err = max(row_err, float(np.max(np.abs(att.sum(axis=1) - 1.0))))
    assert worst <= 1e-10, f"oracle deviation {worst:.2e}"
    assert row_err <= 1e-12, f"row-sum error {row_err:.2e}"
    return f"deviation {worst:.1e}"


@criterion(4, "normalized adjacency hand values and GCN loop oracle")
def test_c04_gcn_oracle():
    assert np.array_equal(build_normalized_adjacency([0]), [[1.0]])
    assert np.allclose(build_normalized_adjacency([1, 1]), [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], rtol=0, atol=1e-15)
    assert np.array_equal(build_normalized_adjacency([0, 1]), np.eye(2))
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(5):
        n = int(rng.integers(1, 7))
        p = init_adaptor("gcn", 5, rng)
        phi, labels = rng.standard_normal((n, 5)), rng.integers(0, 3, size=n)
        s = build_normalized_adjacency(labels)
        h = phi
        for t in range(2):
            w = p[f"w{t}"].value
            nxt = np.zeros((n, w.shape[1]))
            for i in range(n):
                for j in range(w.shape[1]):
                    acc = 0.0
                    for k in range(n):
                        for c in range(h.shape[1]):
                            acc += s[i, k] * h[k, c] * w[c, j]
                    nxt[i, j] = max(acc, 0.0)
            h = nxt
        worst = max(worst, float(np.max(np.abs(adapt_gcn(p, phi, labels).value - h))))
    assert worst <= 1e-12, f"deviation {worst:.2e}"
    return f"deviation {worst:.1e}"


# ---------------------------------------------------------------- trends

@criterion(5, "post-adaptation beats pre-adaptation by >= 1 point, CIs disjoint")
def test_c05_adaptation_helps(bench):
    t0 = time.perf_counter()
    post = bench.standard("feat", bench.feat)
    pre = bench.standard("feat-pre", bench.feat.without_adaptor())
    secs = bench.build_seconds + time.perf_counter() - t0
    gap = post.mean - pre.mean
    assert gap >= 1.0, f"gap {gap:.2f}"
    assert post.mean - post.ci95 > pre.mean + pre.ci95, "confidence intervals overlap"
    assert secs <= 15 * 60, f"took {secs:.0f}s"
    return f"post {post.mean:.2f}+-{post.ci95:.2f} vs pre {pre.mean:.2f}+-{pre.ci95:.2f}"


@criterion(6, "trained FEAT >= trained ProtoNet + 1 point at 1-shot")
def test_c06_feat_beats_protonet(bench):
    feat = bench.standard("feat", bench.feat)
    proto = bench.standard("protonet", bench.protonet)
    assert feat.mean >= proto.mean + 1.0, f"FEAT {feat.mean:.2f} vs ProtoNet {proto.mean:.2f}"
    return f"FEAT {feat.mean:.2f} vs ProtoNet {proto.mean:.2f}"


@criterion(7, "way generalization: strictly decreasing in N, 20-way model runs at N=5")
def test_c07_way_generalization(bench):
    reps = eval_way_generalization(bench.feat, bench.unseen, [5, 10, 15, 20], 1, 15, 500, EVAL_SEED, workers=4)
    means = [reps[n].mean for n in (5, 10, 15, 20)]
    assert all(a > b for a, b in zip(means, means[1:])), f"not decreasing: {means}"
    inter = evaluate(bench.feat20, bench.unseen, 5, 1, 15, 200, EVAL_SEED)
    assert np.isfinite(inter.mean)
    return "N=5/10/15/20: " + "/".join(f"{m:.1f}" for m in means) + f"; 20-way model at N=5: {inter.mean:.1f}"


@criterion(8, "transductive FEAT (soft refinement, 15-per-class pool) >= inductive FEAT")
def test_c08_transductive(bench):
    ind = bench.standard("feat", bench.feat)
    # the pool is either the 15-per-class query set or 15 extra unlabeled rows per class
    as_query = evaluate_transductive(bench.feat, bench.unseen, 5, 1, 15, 0, TASKS, EVAL_SEED, workers=4)
    extra = evaluate_transductive(bench.feat, bench.unseen, 5, 1, 15, 15, TASKS, EVAL_SEED, workers=4)
    assert as_query.mean >= ind.mean, f"query pool {as_query.mean:.2f} vs inductive {ind.mean:.2f}"
    assert extra.mean >= ind.mean, f"extra pool {extra.mean:.2f} vs inductive {ind.mean:.2f}"
    return f"query pool {as_query.mean:.2f}, extra pool {extra.mean:.2f} vs {ind.mean:.2f}"


class RandomScores(FewShotModel):
    """Uniform random joint scores, ignoring the embeddings."""

    def generalized_logits(self, emb, seen_protos, unseen_protos):
        return self.rng.random((emb.shape[0], seen_protos.shape[0] + unseen_protos.shape[0]))


@criterion(9, "generalized evaluation: buckets, random baseline, calibration never hurts")
def test_c09_generalized(bench):
    rep = eval_generalized(bench.feat, bench.heldout, bench.unseen, 5, 1, 15, 200, EVAL_SEED)
    assert {"seen", "unseen", "combined"} <= rep.buckets.keys()
    rand = RandomScores(BackboneParams([BENCH["dim"]]))
    rand.rng = np.random.default_rng(0)
    r = eval_generalized(rand, bench.heldout, bench.unseen, 5, 1, 15, TASKS, EVAL_SEED)
    chance = 100.0 / (bench.heldout.num_classes + 5)
    assert abs(r.mean - chance) <= 2.0, f"random COMBINED {r.mean:.2f} vs {chance:.2f}"
    tasks, n_seen = _generalized_scores(bench.feat, bench.heldout, bench.val, 5, 1, 15, 300, 5)
    base = float(np.mean(_score_generalized(tasks, n_seen, 0.0)[2]))
    for grid in ([0.25, 0.5, 1.0, 2.0], [-3.0, 10.0, 100.0], [5.0]):
        f = calibration_search(bench.feat, bench.heldout, bench.val, grid, 5, 1, 15, 300, 5)
        acc = float(np.mean(_score_generalized(tasks, n_seen, f)[2]))
        assert acc >= base, f"factor {f} lowers validation COMBINED"
    return f"random COMBINED {r.mean:.2f} (chance {chance:.2f})"


# ------------------------------------------------------------- protocol

@criterion(10, "ci95 = 1.96 s / sqrt(n); same-seed runs bitwise equal across workers")
def test_c10_protocol_statistics(bench):
    rep = evaluate(bench.feat, bench.unseen, 5, 1, 15, 300, 123, workers=1)
    pct = [float(a) * 100 for a in rep.per_task]
    mean = sum(pct) / len(pct)
    s = math.sqrt(sum((p - mean) ** 2 for p in pct) / (len(pct) - 1))
    assert rep.ci95 == pytest.approx(1.96 * s / math.sqrt(len(pct)), rel=1e-12)
    for workers in (2, 8):
        other = evaluate(bench.feat, bench.unseen, 5, 1, 15, 300, 123, workers=workers)
        assert other.per_task.tobytes() == rep.per_task.tobytes()
        assert (other.mean, other.ci95) == (rep.mean, rep.ci95)
    return f"ci95 {rep.ci95:.4f}"


@criterion(11, "parameter counts equal shape sums; FEAT smallest at matched d")
def test_c11_parameter_counts():
    rng = np.random.default_rng(0)
    for d in (8, 64):
        counts = {}
        for kind in AdaptorKind:
            p = init_adaptor(kind, d, rng)
            hand = sum(math.prod(t.value.shape) for t in p.tensors.values())
            assert param_count(p) == hand
            counts[kind.value] = hand
        assert min(counts, key=counts.get) == "transformer", counts
    return ", ".join(f"{k} {v}" for k, v in counts.items())


@criterion(12, "checkpoint round-trip bitwise; loaded model evaluates identically")
def test_c12_persistence(bench, tmp_path):
    path = tmp_path / "feat.ckpt"
    save_checkpoint(path, Checkpoint(bench.feat, {"epochs": 10}, {"data": BENCH["seed"]}))
    back = load_checkpoint(path).model
    for a, b in zip(bench.feat.params(), back.params()):
        assert a.value.tobytes() == b.value.tobytes()
    x = evaluate(bench.feat, bench.unseen, 5, 1, 15, 300, 99)
    y = evaluate(back, bench.unseen, 5, 1, 15, 300, 99)
    assert x.per_task.tobytes() == y.per_task.tobytes() and x.mean == y.mean
    return f"{len(back.params())} tensors"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
