"""Evaluation protocols: standard, way generalization, transductive and
generalized (seen + unseen) few-shot classification."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .classify import compute_prototypes, predict
from .episodes import sample_episode
from .errors import ConfigError, UnsupportedProtocolError

Z95 = 1.96

UNION = "union"    # adapt support prototypes together with the unlabeled pool
REFINE = "refine"  # additionally refine prototypes with the adapted pool


@dataclass
class EvalReport:
    """Accuracies in percent. ``buckets`` holds extra per-bucket summaries."""

    protocol: str
    n_tasks: int
    mean: float
    ci95: float
    buckets: dict = field(default_factory=dict)
    per_task: np.ndarray = None

    def record(self):
        out = {"protocol": self.protocol, "n_tasks": self.n_tasks, "mean": self.mean, "ci95": self.ci95}
        for k, v in self.buckets.items():
            out[k] = v
        return out


def summarize(accuracies):
    """(mean %, ci95 %) with the sample standard deviation (ddof=1)."""
    a = np.asarray(accuracies, dtype=np.float64) * 100.0
    if a.size == 0:
        raise ConfigError("no tasks to summarize")
    sd = a.std(ddof=1) if a.size > 1 else 0.0
    return float(a.mean()), float(Z95 * sd / np.sqrt(a.size))


def task_rng(seed, index):
    """Independent generator for task ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def _map_tasks(fn, n_tasks, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(n_tasks)))
    return [fn(i) for i in range(n_tasks)]


def evaluate(model, split, n_way, n_shot, n_query, n_tasks, seed, workers=1, protocol="standard"):
    """Mean query accuracy over ``n_tasks`` sampled episodes."""

    def one(i):
        rng = task_rng(seed, i)
        ep = sample_episode(split, n_way, n_shot, n_query, rng)
        return float(np.mean(model.predict_episode(ep, rng) == ep.query_y))

    accs = np.array(_map_tasks(one, n_tasks, workers))
    mean, ci = summarize(accs)
    return EvalReport(protocol, n_tasks, mean, ci, {"n_way": n_way, "n_shot": n_shot}, accs)


def eval_way_generalization(model, split, way_list, n_shot, n_query, n_tasks, seed, workers=1):
    """One report per number of ways; the model is used unchanged."""
    way_list = list(way_list)
    if max(way_list) > split.num_classes:
        raise ConfigError(f"{max(way_list)}-way tasks need more than the split's {split.num_classes} classes")
    return {
        n: evaluate(model, split, n, n_shot, n_query, n_tasks, seed, workers, protocol=f"{n}-way")
        for n in way_list
    }


# ------------------------------------------------------------ transductive

def refine_prototypes(centers, pool, weights, n_shot):
    """One soft k-means step: a labeled center counts ``n_shot`` times, each
    pool row adds its soft assignment ``weights[u, c]``.

    Returns the refined centers and the ``N x (N + U)`` convex-combination
    coefficients that produce them from ``[centers; pool]``.
    """
    n_way = centers.shape[0]
    coef = np.concatenate([np.eye(n_way) * n_shot, weights.T], axis=1)
    coef /= coef.sum(axis=1, keepdims=True)
    return coef @ np.concatenate([centers, pool], axis=0), coef


def eval_transductive(model, episode, variant=REFINE):
    """Query probabilities when the unlabeled pool joins the adapted set.

    ``UNION``: prototypes are the adapted labeled centers. ``REFINE``: those
    centers are refined once with soft assignments of the adapted pool.
    An empty pool falls back to the inductive prediction.
    """
    if not model.is_transformer:
        raise UnsupportedProtocolError("transductive adaptation needs a transformer adaptor")
    if variant not in (UNION, REFINE):
        raise ConfigError(f"unknown transductive variant {variant!r}")
    with nx.no_grad():
        s = model.embed(episode.support_x)
        q = model.embed(episode.query_x)
        n = episode.n_way
        if not episode.has_pool:
            return predict(model.head, q, model.prototypes(s, episode.support_y, n)).value
        u = model.embed(episode.unlabeled_x)
        pre = model.prototype_position == "pre"
        labeled = compute_prototypes(s, episode.support_y, n) if pre else s
        k = labeled.value.shape[0]
        joint = model.adapt_set(nx.concat_rows([labeled, u]), None)
        adapted_lab = joint.value[:k]
        adapted_pool = joint.value[k:]
        if pre:
            centers = adapted_lab
        else:
            centers = compute_prototypes(adapted_lab, episode.support_y, n).value
        if variant == REFINE:
            w = predict(model.head, adapted_pool, centers).value
            centers, _ = refine_prototypes(centers, adapted_pool, w, episode.n_shot)
        return predict(model.head, q, centers).value


def evaluate_transductive(model, split, n_way, n_shot, n_query, n_unlabeled, n_tasks, seed, variant=REFINE, workers=1):
    """Transductive accuracy over sampled tasks.

    With ``n_unlabeled == 0`` the query set itself is the unlabeled pool, so
    all test instances of a task are seen together. A positive value draws
    that many extra unlabeled rows per class instead.
    """

    def one(i):
        rng = task_rng(seed, i)
        ep = sample_episode(split, n_way, n_shot, n_query, rng, n_unlabeled=n_unlabeled)
        if not n_unlabeled:
            ep = replace(ep, unlabeled_x=ep.query_x)
        return float(np.mean(np.argmax(eval_transductive(model, ep, variant), axis=1) == ep.query_y))

    accs = np.array(_map_tasks(one, n_tasks, workers))
    mean, ci = summarize(accs)
    pool = n_unlabeled if n_unlabeled else "query"
    return EvalReport(f"transductive-{variant}", n_tasks, mean, ci, {"pool": pool}, accs)


# ------------------------------------------------------------- generalized

def _split_heldout(seen_heldout):
    """First half of each seen class builds its prototype, second half is test."""
    proto_rows, test_rows = [], []
    for c in seen_heldout.classes:
        idx = seen_heldout.class_index[int(c)]
        if len(idx) < 2:
            raise ConfigError(f"seen class {c} needs at least 2 held-out rows")
        half = len(idx) // 2
        proto_rows.append(idx[:half])
        test_rows.append(idx[half:])
    return proto_rows, np.concatenate(test_rows)


def _seen_prototypes(model, seen_heldout, proto_rows):
    with nx.no_grad():
        return np.stack([model.embed(seen_heldout.features[r]).value.mean(axis=0) for r in proto_rows])


def _generalized_scores(model, seen_heldout, unseen, n_way, n_shot, n_query, n_tasks, seed, n_seen_test=None, workers=1):
    """Raw score matrices per task, before any calibration."""
    proto_rows, test_rows = _split_heldout(seen_heldout)
    seen_protos = _seen_prototypes(model, seen_heldout, proto_rows)
    n_seen = seen_protos.shape[0]
    class_pos = {int(c): k for k, c in enumerate(seen_heldout.classes)}
    n_seen_test = n_way * n_query if n_seen_test is None else n_seen_test
    if n_seen_test < 1 or n_query < 1:
        raise ConfigError("both seen and unseen buckets need test instances")
    if n_seen_test > len(test_rows):
        raise ConfigError(f"only {len(test_rows)} held-out seen test rows, need {n_seen_test}")

    def one(i):
        rng = task_rng(seed, i)
        ep = sample_episode(unseen, n_way, n_shot, n_query, rng)
        rows = rng.choice(test_rows, n_seen_test, replace=False)
        with nx.no_grad():
            s = model.embed(ep.support_x)
            unseen_protos = model.prototypes(s, ep.support_y, n_way).value
            test_x = np.concatenate([seen_heldout.features[rows], ep.query_x], axis=0)
            emb = model.embed(test_x).value
        scores = model.generalized_logits(emb, seen_protos, unseen_protos)
        seen_y = np.array([class_pos[int(c)] for c in seen_heldout.labels[rows]])
        truth = np.concatenate([seen_y, n_seen + ep.query_y])
        return scores, truth, n_seen_test

    return _map_tasks(one, n_tasks, workers), n_seen


def _score_generalized(tasks, n_seen, calibration):
    seen_acc, unseen_acc, comb_acc = [], [], []
    seen_joint = unseen_joint = 0
    totals = [0, 0]
    for scores, truth, k in tasks:
        cal = scores.copy()
        cal[:, :n_seen] -= calibration
        joint = np.argmax(cal, axis=1) == truth
        seen_pred = np.argmax(scores[:k, :n_seen], axis=1)
        unseen_pred = n_seen + np.argmax(scores[k:, n_seen:], axis=1)
        seen_acc.append(np.mean(seen_pred == truth[:k]))
        unseen_acc.append(np.mean(unseen_pred == truth[k:]))
        comb_acc.append(np.mean(joint))
        seen_joint += int(joint[:k].sum())
        unseen_joint += int(joint[k:].sum())
        totals[0] += k
        totals[1] += len(truth) - k
    return np.array(seen_acc), np.array(unseen_acc), np.array(comb_acc), seen_joint, unseen_joint, totals


def _generalized_report(tasks, n_seen, calibration):
    seen, unseen, comb, sj, uj, totals = _score_generalized(tasks, n_seen, calibration)
    sm, sc = summarize(seen)
    um, uc = summarize(unseen)
    cm, cc = summarize(comb)
    buckets = {
        "seen": sm, "seen_ci95": sc,
        "unseen": um, "unseen_ci95": uc,
        "combined": cm, "combined_ci95": cc,
        "seen_joint_correct": sj, "unseen_joint_correct": uj,
        "seen_count": totals[0], "unseen_count": totals[1],
        "calibration": calibration, "n_seen_classes": n_seen,
    }
    return EvalReport("generalized", len(tasks), cm, cc, buckets, comb)


def eval_generalized(model, seen_heldout, unseen, n_way, n_shot, n_query, n_tasks, seed, calibration=0.0, n_seen_test=None, workers=1):
    """SEEN / UNSEEN / COMBINED accuracies.

    Seen prototypes are class means of the first half of each class in
    ``seen_heldout``; test rows come from the second half. SEEN scores seen
    test rows over seen classes only, UNSEEN scores episode queries over the
    episode's classes only, and COMBINED scores every test row over all
    classes after subtracting ``calibration`` from the seen scores.
    """
    tasks, n_seen = _generalized_scores(model, seen_heldout, unseen, n_way, n_shot, n_query, n_tasks, seed, n_seen_test, workers)
    return _generalized_report(tasks, n_seen, calibration)


def calibration_search(model, seen_heldout, val_unseen, grid, n_way, n_shot, n_query, n_tasks, seed, n_seen_test=None, workers=1):
    """Calibration factor maximizing COMBINED validation accuracy.

    All candidates are scored on the same tasks. 0 is always a candidate,
    so the result never does worse than no calibration; ties go to the
    smallest factor.
    """
    tasks, n_seen = _generalized_scores(model, seen_heldout, val_unseen, n_way, n_shot, n_query, n_tasks, seed, n_seen_test, workers)
    best, best_acc = None, -1.0
    for f in sorted(set(float(g) for g in grid) | {0.0}):
        acc = float(np.mean(_score_generalized(tasks, n_seen, f)[2]))
        if acc > best_acc:
            best, best_acc = f, acc
    return best
