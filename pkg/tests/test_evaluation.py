import math

import numpy as np
import pytest

from setadapt import numerics as nx
from setadapt.adaptors import adapt_transformer, init_adaptor
from setadapt.backbone import BackboneParams
from setadapt.classify import compute_prototypes, predict
from setadapt.episodes import gen_synthetic, holdout_rows, make_splits, sample_episode
from setadapt.errors import ConfigError, UnsupportedProtocolError
from setadapt.evaluation import (
    REFINE,
    UNION,
    _generalized_scores,
    _score_generalized,
    calibration_search,
    eval_generalized,
    eval_transductive,
    eval_way_generalization,
    evaluate,
    evaluate_transductive,
    refine_prototypes,
    summarize,
    task_rng,
)
from setadapt.model import FewShotModel


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    ds = gen_synthetic(40, 40, 6, 0.7, 1.0, rng)
    seen, val, unseen = make_splits(ds, 0.5, 0.25, rng)
    seen, held = holdout_rows(seen, 10, rng)
    return seen, held, val, unseen


@pytest.fixture(scope="module")
def feat():
    rng = np.random.default_rng(1)
    return FewShotModel(BackboneParams.init([6, 8, 6], rng), init_adaptor("feat", 6, rng))


# ----------------------------------------------------------------- stats

def test_summarize_hand_formula():
    accs = [0.5, 0.75, 1.0, 0.25]
    pct = [50.0, 75.0, 100.0, 25.0]
    mean = sum(pct) / 4
    sd = math.sqrt(sum((p - mean) ** 2 for p in pct) / 3)
    assert summarize(accs) == (mean, 1.96 * sd / 2.0)
    assert summarize([0.3]) == (30.0, 0.0)
    with pytest.raises(ConfigError):
        summarize([])


def test_report_ci_matches_per_task(data, feat):
    rep = evaluate(feat, data[3], 5, 1, 15, 50, seed=3)
    a = rep.per_task * 100
    assert rep.mean == a.mean()
    assert rep.ci95 == 1.96 * a.std(ddof=1) / math.sqrt(50)
    assert rep.record()["n_way"] == 5


def test_parallel_runs_are_bitwise_identical(data, feat):
    a = evaluate(feat, data[3], 5, 1, 15, 40, seed=7, workers=1)
    b = evaluate(feat, data[3], 5, 1, 15, 40, seed=7, workers=4)
    assert np.array_equal(a.per_task, b.per_task) and a.mean == b.mean and a.ci95 == b.ci95
    c = evaluate(feat, data[3], 5, 1, 15, 40, seed=8)
    assert not np.array_equal(a.per_task, c.per_task)


def test_task_rng_streams_are_independent():
    assert task_rng(1, 0).random() == task_rng(1, 0).random()
    assert task_rng(1, 0).random() != task_rng(1, 1).random()
    assert task_rng(1, 2).random() != task_rng(2, 1).random()


def test_way_generalization(data, feat):
    reps = eval_way_generalization(feat, data[3], [5, 10], 1, 5, 20, seed=0)
    assert list(reps) == [5, 10] and reps[5].mean > reps[10].mean
    with pytest.raises(ConfigError):
        eval_way_generalization(feat, data[3], [5, 11], 1, 5, 20, seed=0)


# ----------------------------------------------------------- transductive

def test_refine_prototypes_oracle(rng):
    centers, pool = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
    w = rng.dirichlet([1, 1], size=4)
    got, coef = refine_prototypes(centers, pool, w, n_shot=2)
    for c in range(2):
        want = (2 * centers[c] + (w[:, c:c + 1] * pool).sum(0)) / (2 + w[:, c].sum())
        assert np.allclose(got[c], want)
    assert np.allclose(coef.sum(axis=1), 1.0)


def test_union_variant_oracle(data, feat):
    ep = sample_episode(data[3], 3, 2, 4, np.random.default_rng(0), n_unlabeled=2)
    s, q, u = (feat.embed(x).value for x in (ep.support_x, ep.query_x, ep.unlabeled_x))
    protos = compute_prototypes(s, ep.support_y, 3).value
    adapted = adapt_transformer(feat.adaptor, np.vstack([protos, u])).value[:3]
    want = predict(feat.head, q, adapted).value
    assert np.allclose(eval_transductive(feat, ep, UNION), want, atol=1e-14)


def test_refine_variant_oracle(data, feat):
    ep = sample_episode(data[3], 3, 1, 4, np.random.default_rng(1), n_unlabeled=3)
    s, q, u = (feat.embed(x).value for x in (ep.support_x, ep.query_x, ep.unlabeled_x))
    joint = adapt_transformer(feat.adaptor, np.vstack([s, u])).value
    centers, pool = joint[:3], joint[3:]
    w = predict(feat.head, pool, centers).value
    refined = np.stack([(centers[c] + (w[:, c:c + 1] * pool).sum(0)) / (1 + w[:, c].sum()) for c in range(3)])
    assert np.allclose(eval_transductive(feat, ep, REFINE), predict(feat.head, q, refined).value, atol=1e-14)


def test_transductive_fallback_and_errors(data, feat):
    ep = sample_episode(data[3], 3, 1, 4, np.random.default_rng(2))
    with nx.no_grad():
        inductive = predict(feat.head, feat.embed(ep.query_x), feat.prototypes(feat.embed(ep.support_x), ep.support_y, 3)).value
    assert np.array_equal(eval_transductive(feat, ep), inductive)
    with pytest.raises(UnsupportedProtocolError):
        eval_transductive(feat.without_adaptor(), ep)
    with pytest.raises(ConfigError):
        eval_transductive(feat, ep, "both")


def test_query_pool_default(data, feat):
    rep = evaluate_transductive(feat, data[3], 5, 1, 5, 0, 10, seed=0)
    assert rep.buckets["pool"] == "query" and 0 <= rep.mean <= 100
    rep = evaluate_transductive(feat, data[3], 5, 1, 5, 3, 10, seed=0, variant=UNION)
    assert rep.buckets["pool"] == 3


# ------------------------------------------------------------ generalized

class ScoreStub:
    """Model whose joint scores come from ``score_fn(rows, n_seen, n_unseen)``."""

    prototype_position = "pre"

    def __init__(self, score_fn):
        self.score_fn = score_fn

    def embed(self, x):
        return nx.const(x)

    def prototypes(self, s, y, n_way, *a, **k):
        return compute_prototypes(s, y, n_way)

    def generalized_logits(self, emb, seen_protos, unseen_protos):
        return self.score_fn(emb.shape[0], seen_protos.shape[0], unseen_protos.shape[0])


def test_random_predictor_combined_rate(data):
    seen, held, val, unseen = data
    rng = np.random.default_rng(0)
    stub = ScoreStub(lambda n, s, u: rng.random((n, s + u)))
    rep = eval_generalized(stub, held, unseen, 5, 1, 15, 300, seed=0)
    expected = 100.0 / (held.num_classes + 5)
    assert abs(rep.mean - expected) < 2.0
    b = rep.buckets
    assert abs(b["seen"] - 100.0 / held.num_classes) < 2.0 and abs(b["unseen"] - 20.0) < 2.0
    assert b["seen_count"] == b["unseen_count"] == 300 * 75


def test_joint_counts_match_combined_mean(data):
    seen, held, val, unseen = data
    model = FewShotModel(BackboneParams([6]))
    rep = eval_generalized(model, held, unseen, 5, 1, 5, 20, seed=1, n_seen_test=25)
    b = rep.buckets
    # equal rows per task, so the pooled rate equals the mean of per-task rates
    total = b["seen_joint_correct"] + b["unseen_joint_correct"]
    assert total / (b["seen_count"] + b["unseen_count"]) * 100 == pytest.approx(rep.mean)
    assert 0 <= b["combined"] <= 100 and b["n_seen_classes"] == held.num_classes


class SeenBiased(FewShotModel):
    """Raw-feature nearest prototype with a constant bonus on seen scores."""

    delta = 2.0

    def generalized_logits(self, emb, seen_protos, unseen_protos):
        out = super().generalized_logits(emb, seen_protos, unseen_protos)
        out[:, :seen_protos.shape[0]] += self.delta
        return out


def combined_oracle(tasks, n_seen, factor):
    accs = []
    for scores, truth, _ in tasks:
        shift = np.where(np.arange(scores.shape[1]) < n_seen, factor, 0.0)
        accs.append(np.mean(np.argmax(scores - shift, axis=1) == truth))
    return float(np.mean(accs))


def test_calibration_search_undoes_seen_bias(data):
    seen, held, val, unseen = data
    model = SeenBiased(BackboneParams([6]))
    grid = [0.5, 1.0, 2.0, 3.0, 6.0]
    tasks, n_seen = _generalized_scores(model, held, val, 5, 1, 15, 60, 3)
    accs = {g: combined_oracle(tasks, n_seen, g) for g in [0.0] + grid}
    want = min(g for g in accs if accs[g] == max(accs.values()))
    got = calibration_search(model, held, val, grid, 5, 1, 15, 60, 3)
    assert got == want
    assert 1.0 <= got <= 3.0
    assert accs[got] > accs[0.0] + 0.05
    assert accs[got] == pytest.approx(float(np.mean(_score_generalized(tasks, n_seen, got)[2])))


def test_calibration_never_worse_than_zero(data, feat):
    seen, held, val, unseen = data
    grid = [-1.0, 0.5, 5.0, 50.0]
    f = calibration_search(feat, held, val, grid, 5, 1, 15, 40, seed=4)
    acc_f = eval_generalized(feat, held, val, 5, 1, 15, 40, seed=4, calibration=f).mean
    acc_0 = eval_generalized(feat, held, val, 5, 1, 15, 40, seed=4, calibration=0.0).mean
    assert acc_f >= acc_0


def test_generalized_input_checks(data, feat):
    seen, held, val, unseen = data
    with pytest.raises(ConfigError):
        eval_generalized(feat, held, unseen, 5, 1, 15, 2, seed=0, n_seen_test=10**6)
    with pytest.raises(ConfigError):
        eval_generalized(feat, held, unseen, 5, 1, 0, 2, seed=0)
