"""Run configuration: a YAML key/value tree merged over defaults.

Top-level sections and keys (all optional, see ``DEFAULTS``):

* ``data``: ``path`` or the synthetic generator settings
  ``classes``, ``per_class``, ``dim``, ``spread``, ``separation``, ``seed``.
* ``split``: ``seen_frac``, ``val_frac``, ``heldout_per_class``, ``seed``.
* ``backbone``: ``sizes`` (input size first; empty means ``[dim, 64, dim]``).
* ``pretrain``: ``epochs``, ``lr``, ``batch_size``, ``val_tasks``, ``seed``.
* ``adaptor``: ``kind`` (``protonet`` for none) and kind-specific settings.
* ``head``: ``kind``, ``temperature``, ``prototype_position``.
* ``train``: the fields of ``TrainConfig`` plus ``optimizer`` and ``lr``.
* ``eval``: ``tasks``, ``n_way``, ``n_shot``, ``n_query``, ``split``,
  ``seed``, ``workers`` and protocol extras.
"""

import copy

import yaml

from .errors import ConfigError

DEFAULTS = {
    "data": {"path": None, "classes": 60, "per_class": 60, "dim": 32, "spread": 0.6, "separation": 1.0, "seed": 0},
    "split": {"seen_frac": 0.5, "val_frac": 0.17, "heldout_per_class": 10, "seed": 0},
    "backbone": {"sizes": []},
    "pretrain": {"epochs": 10, "lr": 1e-3, "batch_size": 64, "val_tasks": 200, "seed": 1},
    "adaptor": {"kind": "feat", "options": {}},
    "head": {"kind": "euclidean", "temperature": None, "prototype_position": "pre"},
    "train": {
        "n_way": 5, "n_shot": 1, "n_query": 15, "epochs": 10, "episodes_per_epoch": 100,
        "lam": 0.1, "optimizer": "adam", "lr": 0.002, "backbone_lr_scale": 0.1,
        "lr_decay": 0.5, "decay_every": 10, "val_tasks": 200, "val_way": None, "seed": 3,
    },
    "eval": {
        "tasks": 10000, "n_way": 5, "n_shot": 1, "n_query": 15, "split": "unseen", "seed": 11,
        "workers": 1, "ways": [5, 10, 15, 20], "variant": "refine", "unlabeled": 0,
        "calibration": None, "calibration_grid": [0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
    },
}


def merge(base, update, path=""):
    """Deep-merge ``update`` into a copy of ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and key != "options":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the YAML file at ``path``, then dotted ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                doc = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = merge(cfg, doc)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        cfg = merge(cfg, {section: {key: value}})
    return cfg
