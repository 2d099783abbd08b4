"""Command-line entry point: ``setadapt <subcommand> [flags]``.

Every subcommand reads the YAML config given by ``--config`` (if any) and
then applies its flags on top. Result records go to stdout as JSON lines;
a readable summary goes to stderr.
"""

import argparse
import csv
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import optim
from .adaptors import AdaptorKind, equivariance_error, init_adaptor, param_count
from .backbone import BackboneParams, pretrain_backbone
from .classify import SimilarityHead
from .config import load_config
from .episodes import gen_synthetic, holdout_rows, make_splits
from .errors import ConfigError, SetAdaptError
from .evaluation import (
    calibration_search,
    eval_generalized,
    eval_way_generalization,
    evaluate,
    evaluate_transductive,
)
from .io import Checkpoint, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .model import FewShotModel
from .training import TrainConfig, gradient_check, train

log = logging.getLogger("setadapt")

ADAPTOR_CHOICES = ["protonet", "feat", "transformer", "bilstm", "deepsets", "gcn"]


def _ints(text):
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text):
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _emit(record, table=None):
    print(json.dumps(record, sort_keys=True), flush=True)
    if table:
        print(table, file=sys.stderr)


# ----------------------------------------------------------------- builders

def dataset_from(cfg):
    d = cfg["data"]
    if d["path"]:
        return load_dataset(d["path"])
    rng = np.random.default_rng(d["seed"])
    return gen_synthetic(d["classes"], d["per_class"], d["dim"], d["spread"], d["separation"], rng)


def splits_from(cfg, dataset):
    """(seen_train, seen_heldout, val, unseen); held-out seen rows never train."""
    s = cfg["split"]
    rng = np.random.default_rng(s["seed"])
    seen, val, unseen = make_splits(dataset, s["seen_frac"], s["val_frac"], rng)
    if s["heldout_per_class"]:
        seen, heldout = holdout_rows(seen, s["heldout_per_class"], rng)
    else:
        heldout = None
    return seen, heldout, val, unseen


def backbone_sizes(cfg, dim):
    sizes = list(cfg["backbone"]["sizes"] or [dim, 64, dim])
    if sizes[0] != dim:
        raise ConfigError(f"backbone input size {sizes[0]} does not match data dim {dim}")
    return sizes


def train_config_from(cfg):
    t = dict(cfg["train"])
    kind = t.pop("optimizer")
    lr = t.pop("lr")
    if kind == "adam":
        opt = optim.AdamConfig(lr=lr)
    elif kind == "sgd":
        opt = optim.SGDConfig(lr=lr)
    else:
        raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {kind!r}")
    return TrainConfig(optimizer=opt, **t)


def head_from(cfg):
    return SimilarityHead(cfg["head"]["kind"], cfg["head"]["temperature"])


def run_pretrain(cfg, seen, val):
    p = cfg["pretrain"]
    sizes = backbone_sizes(cfg, seen.dim)
    init = BackboneParams.init(sizes, np.random.default_rng(p["seed"]))
    if len(sizes) == 1 or p["epochs"] == 0:
        return init, []
    res = pretrain_backbone(
        init, seen, p["epochs"], optim.AdamConfig(lr=p["lr"]),
        val_data=val, val_tasks=p["val_tasks"], batch_size=p["batch_size"], seed=p["seed"],
    )
    return res.params, res.history


def lineage(cfg, **extra):
    seeds = {
        "data": cfg["data"]["seed"] if not cfg["data"]["path"] else None,
        "data_path": cfg["data"]["path"],
        "split": cfg["split"]["seed"],
    }
    seeds.update(extra)
    return seeds


def model_for_eval(args, cfg, dim):
    if args.model:
        return load_checkpoint(args.model).model
    # no checkpoint: nearest prototype on raw features
    return FewShotModel(BackboneParams([dim]), None, head_from(cfg))


def eval_split(cfg, parts):
    seen, _, val, unseen = parts
    name = cfg["eval"]["split"]
    table = {"unseen": unseen, "val": val, "seen": seen}
    if name not in table:
        raise ConfigError(f"eval split must be one of {sorted(table)}, got {name!r}")
    return table[name]


# -------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg):
    ds = dataset_from({**cfg, "data": {**cfg["data"], "path": None}})
    save_dataset(args.out, ds)
    _emit({"command": "gen-data", "path": args.out, "rows": len(ds), "dim": ds.dim, "classes": ds.num_classes})
    return 0


def cmd_pretrain(args, cfg):
    ds = dataset_from(cfg)
    seen, _, val, _ = splits_from(cfg, ds)
    params, history = run_pretrain(cfg, seen, val)
    for rec in history:
        _emit({"command": "pretrain", **rec})
    model = FewShotModel(params, None, head_from(cfg), cfg["head"]["prototype_position"])
    save_checkpoint(args.out, Checkpoint(model, None, lineage(cfg, pretrain=cfg["pretrain"]["seed"])))
    return 0


def cmd_train(args, cfg):
    ds = dataset_from(cfg)
    seen, _, val, _ = splits_from(cfg, ds)
    if args.init:
        backbone = load_checkpoint(args.init).model.backbone
    else:
        backbone, _ = run_pretrain(cfg, seen, val)
    kind = cfg["adaptor"]["kind"]
    adaptor = None
    if kind != "protonet":
        rng = np.random.default_rng(cfg["train"]["seed"] + 1)
        adaptor = init_adaptor(kind, backbone.out_dim, rng, **cfg["adaptor"]["options"])
    model = FewShotModel(backbone, adaptor, head_from(cfg), cfg["head"]["prototype_position"])
    tc = train_config_from(cfg)
    result = train(tc, seen, val, model, log_fn=lambda r: _emit({"command": "train", **r}))
    _emit(
        {"command": "train", "best_epoch": result.best_epoch, "initial_val_acc": result.initial_val_acc, "out": args.out},
        f"trained {model.name}: best epoch {result.best_epoch}",
    )
    seeds = lineage(cfg, pretrain=None if args.init else cfg["pretrain"]["seed"], train=tc.seed, init=args.init)
    save_checkpoint(args.out, Checkpoint(result.model, tc.to_dict(), seeds))
    return 0


def _report_table(label, rep):
    return f"{label}: {rep.mean:.2f} +- {rep.ci95:.2f} over {rep.n_tasks} tasks"


def cmd_eval(args, cfg):
    ds = dataset_from(cfg)
    split = eval_split(cfg, splits_from(cfg, ds))
    model = model_for_eval(args, cfg, ds.dim)
    if args.pre_adapt:
        model = model.without_adaptor()
    e = cfg["eval"]
    rep = evaluate(model, split, e["n_way"], e["n_shot"], e["n_query"], e["tasks"], e["seed"], e["workers"])
    _emit({"command": "eval", "model": model.name, **rep.record()}, _report_table(f"{e['n_way']}-way {e['n_shot']}-shot", rep))
    return 0


def cmd_eval_ways(args, cfg):
    ds = dataset_from(cfg)
    split = eval_split(cfg, splits_from(cfg, ds))
    model = model_for_eval(args, cfg, ds.dim)
    e = cfg["eval"]
    reps = eval_way_generalization(model, split, e["ways"], e["n_shot"], e["n_query"], e["tasks"], e["seed"], e["workers"])
    for n, rep in reps.items():
        _emit({"command": "eval-ways", "n_way": n, **rep.record()}, _report_table(f"{n}-way", rep))
    return 0


def cmd_eval_transductive(args, cfg):
    ds = dataset_from(cfg)
    split = eval_split(cfg, splits_from(cfg, ds))
    model = model_for_eval(args, cfg, ds.dim)
    e = cfg["eval"]
    rep = evaluate_transductive(
        model, split, e["n_way"], e["n_shot"], e["n_query"], e["unlabeled"], e["tasks"], e["seed"], e["variant"], e["workers"]
    )
    _emit({"command": "eval-transductive", **rep.record()}, _report_table(f"transductive ({e['variant']})", rep))
    return 0


def cmd_eval_generalized(args, cfg):
    ds = dataset_from(cfg)
    _, heldout, val, unseen = splits_from(cfg, ds)
    if heldout is None:
        raise ConfigError("generalized evaluation needs split.heldout_per_class > 0")
    model = model_for_eval(args, cfg, ds.dim)
    e = cfg["eval"]
    cal = e["calibration"]
    if cal is None:
        cal = calibration_search(
            model, heldout, val, e["calibration_grid"], e["n_way"], e["n_shot"], e["n_query"],
            min(e["tasks"], 500), e["seed"] + 1, workers=e["workers"],
        )
    rep = eval_generalized(model, heldout, unseen, e["n_way"], e["n_shot"], e["n_query"], e["tasks"], e["seed"], cal, workers=e["workers"])
    b = rep.buckets
    table = f"SEEN {b['seen']:.2f}  UNSEEN {b['unseen']:.2f}  COMBINED {b['combined']:.2f}  (calibration {cal:g})"
    _emit({"command": "eval-generalized", **rep.record()}, table)
    return 0


def cmd_grad_check(args, cfg):
    worst = 0.0
    for s in range(args.seeds):
        err = gradient_check(args.adaptor, args.d, args.seed + s, args.n, args.m, args.q)
        worst = max(worst, float(err))
    ok = worst <= args.tol
    _emit({"command": "grad-check", "adaptor": args.adaptor, "d": args.d, "max_rel_error": worst, "pass": ok},
          f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'}, tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_invariance_check(args, cfg):
    rng = np.random.default_rng(args.seed)
    p = init_adaptor(args.adaptor, args.d, rng)
    phi = rng.standard_normal((args.n, args.d))
    labels = rng.integers(0, max(1, args.n // 2), size=args.n)
    if args.n <= 6:
        perms = list(itertools.permutations(range(args.n)))
    else:
        perms = [rng.permutation(args.n) for _ in range(args.perms)]
    err = equivariance_error(p, phi, perms, labels)
    eq = err <= 1e-9
    _emit({"command": "invariance-check", "adaptor": p.kind.value, "n": args.n, "perms": len(perms), "max_abs_error": err, "equivariant": eq},
          f"{p.kind.value}: max deviation {err:.3e} over {len(perms)} permutations ({'equivariant' if eq else 'not equivariant'})")
    return 0


def cmd_param_count(args, cfg):
    rng = np.random.default_rng(0)
    for kind in AdaptorKind:
        n = param_count(init_adaptor(kind, args.d, rng))
        _emit({"command": "param-count", "adaptor": kind.value, "d": args.d, "params": n}, f"{kind.value:12s} {n:>9d}")
    return 0


def cmd_plot_dump(args, cfg):
    ds = dataset_from(cfg)
    split = eval_split(cfg, splits_from(cfg, ds))
    model = model_for_eval(args, cfg, ds.dim)
    e = cfg["eval"]
    os.makedirs(args.out_dir, exist_ok=True)
    reps = eval_way_generalization(model, split, e["ways"], e["n_shot"], e["n_query"], e["tasks"], e["seed"], e["workers"])
    with open(os.path.join(args.out_dir, "per_task.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_way", "task", "accuracy"])
        for n, rep in reps.items():
            for i, acc in enumerate(rep.per_task):
                w.writerow([n, i, repr(float(acc))])
    with open(os.path.join(args.out_dir, "ways.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_way", "mean", "ci95", "n_tasks"])
        for n, rep in reps.items():
            w.writerow([n, repr(rep.mean), repr(rep.ci95), rep.n_tasks])
    _emit({"command": "plot-dump", "out_dir": args.out_dir, "ways": list(reps)})
    return 0


# ------------------------------------------------------------------ parser

def _data_flags(p):
    p.add_argument("--data", dest="data.path", help="dataset file (default: synthetic from config)")


def _eval_flags(p, ways=False):
    _data_flags(p)
    p.add_argument("--model", help="checkpoint to evaluate (default: nearest prototype on raw features)")
    p.add_argument("--tasks", dest="eval.tasks", type=int)
    p.add_argument("--n", dest="eval.n_way", type=int, help="ways")
    p.add_argument("--m", dest="eval.n_shot", type=int, help="shots")
    p.add_argument("--q", dest="eval.n_query", type=int, help="queries per class")
    p.add_argument("--split", dest="eval.split", choices=["unseen", "val", "seen"])
    p.add_argument("--seed", dest="eval.seed", type=int)
    p.add_argument("--workers", dest="eval.workers", type=int)
    if ways:
        p.add_argument("--ways", dest="eval.ways", type=_ints, help="e.g. 5,10,15,20")


def build_parser():
    parser = argparse.ArgumentParser(prog="setadapt", description="Few-shot classification with set-to-set embedding adaptation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset file")
    p.add_argument("--classes", dest="data.classes", type=int)
    p.add_argument("--per-class", dest="data.per_class", type=int)
    p.add_argument("--dim", dest="data.dim", type=int)
    p.add_argument("--spread", dest="data.spread", type=float)
    p.add_argument("--separation", dest="data.separation", type=float)
    p.add_argument("--seed", dest="data.seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="pre-train the backbone on all seen classes")
    _data_flags(p)
    p.add_argument("--sizes", dest="backbone.sizes", type=_ints, help="layer sizes, e.g. 32,64,32")
    p.add_argument("--epochs", dest="pretrain.epochs", type=int)
    p.add_argument("--lr", dest="pretrain.lr", type=float)
    p.add_argument("--seed", dest="pretrain.seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="episodic training of backbone and adaptor")
    _data_flags(p)
    p.add_argument("--init", help="checkpoint whose backbone starts training (default: pre-train first)")
    p.add_argument("--adaptor", dest="adaptor.kind", choices=ADAPTOR_CHOICES)
    p.add_argument("--sizes", dest="backbone.sizes", type=_ints)
    p.add_argument("--lam", dest="train.lam", type=float, help="contrastive weight")
    p.add_argument("--epochs", dest="train.epochs", type=int)
    p.add_argument("--episodes", dest="train.episodes_per_epoch", type=int)
    p.add_argument("--n", dest="train.n_way", type=int)
    p.add_argument("--m", dest="train.n_shot", type=int)
    p.add_argument("--q", dest="train.n_query", type=int)
    p.add_argument("--lr", dest="train.lr", type=float)
    p.add_argument("--optimizer", dest="train.optimizer", choices=["adam", "sgd"])
    p.add_argument("--seed", dest="train.seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="standard few-shot accuracy with 95%% CI")
    _eval_flags(p)
    p.add_argument("--pre-adapt", action="store_true", help="build prototypes from raw embeddings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-ways", parents=[common], help="evaluate one model at several numbers of ways")
    _eval_flags(p, ways=True)
    p.set_defaults(func=cmd_eval_ways)

    p = sub.add_parser("eval-transductive", parents=[common], help="transductive evaluation (transformer only)")
    _eval_flags(p)
    p.add_argument("--variant", dest="eval.variant", choices=["union", "refine"])
    p.add_argument("--unlabeled", dest="eval.unlabeled", type=int, help="extra pool rows per class (0: use the queries)")
    p.set_defaults(func=cmd_eval_transductive)

    p = sub.add_parser("eval-generalized", parents=[common], help="joint seen + unseen evaluation")
    _eval_flags(p)
    p.add_argument("--calibration", dest="eval.calibration", type=float, help="fixed factor (default: search on val)")
    p.add_argument("--grid", dest="eval.calibration_grid", type=_floats)
    p.set_defaults(func=cmd_eval_generalized)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of episode-loss gradients")
    p.add_argument("--adaptor", default="feat", choices=ADAPTOR_CHOICES[1:])
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--q", type=int, default=2)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("invariance-check", parents=[common], help="permutation-equivariance check of an adaptor")
    p.add_argument("--adaptor", default="feat", choices=ADAPTOR_CHOICES[1:])
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--perms", type=int, default=20, help="random permutations when n > 6")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_invariance_check)

    p = sub.add_parser("param-count", parents=[common], help="parameter count of every adaptor")
    p.add_argument("--d", type=int, default=64)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("plot-dump", parents=[common], help="write per-task and per-N accuracies as CSV")
    _eval_flags(p, ways=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_plot_dump)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    try:
        cfg = load_config(getattr(args, "config", None), overrides)
        return args.func(args, cfg)
    except (SetAdaptError, OSError) as exc:
        print(f"setadapt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
