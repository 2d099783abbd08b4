"""Dataset and checkpoint file formats.

Datasets are plain text::

    # setadapt-dataset v1
    dim=2 rows=2 classes=2
    0,0.5,-1.25
    1,3.0,4.0

Floats are written with ``repr`` so the text round-trips bitwise.

Checkpoints are binary: the magic ``SETADAPT``, a little-endian u32 format
version, a u64 header length, a UTF-8 JSON header, every tensor as
little-endian float64 in header order, and a SHA-256 digest of all
preceding bytes.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .adaptors import AdaptorKind, AdaptorParams
from .backbone import BackboneParams
from .classify import SimilarityHead
from .episodes import VectorDataset
from .errors import FormatError, IncompatibleVersionError, IntegrityError, SchemaError
from .model import FewShotModel

DATASET_MAGIC = "# setadapt-dataset"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"SETADAPT"
CHECKPOINT_VERSION = 1
_DIGEST = 32


# ----------------------------------------------------------------- datasets

def save_dataset(path, dataset):
    classes = dataset.classes
    if not np.array_equal(classes, np.arange(len(classes))):
        raise SchemaError("class ids must be dense 0..C-1 to be saved")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{DATASET_MAGIC} v{DATASET_VERSION}\n")
        fh.write(f"dim={dataset.dim} rows={len(dataset)} classes={dataset.num_classes}\n")
        for y, row in zip(dataset.labels, dataset.features):
            fh.write(",".join([str(int(y))] + [repr(float(v)) for v in row]) + "\n")


def _parse_header(line, lineno):
    fields = {}
    for part in line.split():
        key, sep, value = part.partition("=")
        if not sep:
            raise FormatError(f"expected key=value, got {part!r}", lineno)
        try:
            fields[key] = int(value)
        except ValueError:
            raise FormatError(f"{key} must be an integer, got {value!r}", lineno) from None
    missing = {"dim", "rows", "classes"} - fields.keys()
    if missing:
        raise FormatError(f"header lacks {', '.join(sorted(missing))}", lineno)
    if fields["dim"] < 1 or fields["rows"] < 0 or fields["classes"] < 0:
        raise FormatError("header counts out of range", lineno)
    return fields["dim"], fields["rows"], fields["classes"]


def load_dataset(path):
    """Parse and validate a dataset file into a VectorDataset."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty file", 1)
    magic, _, version = lines[0].rpartition(" ")
    if magic != DATASET_MAGIC or not version.startswith("v"):
        raise FormatError(f"missing '{DATASET_MAGIC} v<N>' marker", 1)
    if version != f"v{DATASET_VERSION}":
        raise IncompatibleVersionError(f"dataset version {version} is not supported", 1)
    if len(lines) < 2:
        raise FormatError("missing header line", 2)
    dim, n_rows, n_classes = _parse_header(lines[1], 2)

    body = [(i, ln) for i, ln in enumerate(lines[2:], start=3) if ln.strip()]
    if len(body) != n_rows:
        raise SchemaError(f"header declares {n_rows} rows, found {len(body)}")
    features = np.empty((n_rows, dim))
    labels = np.empty(n_rows, dtype=np.int64)
    for k, (lineno, text) in enumerate(body):
        cells = text.split(",")
        if len(cells) != dim + 1:
            raise SchemaError(f"expected {dim} features, found {len(cells) - 1}", lineno)
        try:
            labels[k] = int(cells[0])
            features[k] = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise FormatError(str(exc), lineno) from None
        if not np.all(np.isfinite(features[k])):
            raise FormatError("non-finite feature value", lineno)
        if not 0 <= labels[k] < n_classes:
            raise SchemaError(f"class id {labels[k]} outside 0..{n_classes - 1}", lineno)
    seen = np.unique(labels)
    if len(seen) != n_classes:
        raise SchemaError(f"header declares {n_classes} classes, found {len(seen)}")
    return VectorDataset(features, labels)


# -------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    """A model plus the settings and seeds that produced it."""

    model: FewShotModel
    train_config: dict = None
    seeds: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _tensors(model):
    out = [(f"backbone.{k}", v.value) for k, v in model.backbone.named_params().items()]
    if model.adaptor is not None:
        out += [(f"adaptor.{k}", v.value) for k, v in model.adaptor.tensors.items()]
    return out


def save_checkpoint(path, ckpt):
    model = ckpt.model
    tensors = _tensors(model)
    header = {
        "backbone": {"sizes": list(model.backbone.sizes)},
        "adaptor": None if model.adaptor is None else {
            "kind": model.adaptor.kind.value,
            "dim": model.adaptor.dim,
            "config": model.adaptor.config,
        },
        "head": {"kind": model.head.kind.value, "temperature": model.head.temperature},
        "prototype_position": model.prototype_position,
        "train_config": ckpt.train_config,
        "seeds": ckpt.seeds,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors]
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload + hashlib.sha256(payload).digest())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    fixed = len(CHECKPOINT_MAGIC) + 12
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a setadapt checkpoint")
    if len(data) < fixed:
        raise IntegrityError("checkpoint truncated in the preamble")
    version, header_len = struct.unpack("<IQ", data[len(CHECKPOINT_MAGIC):fixed])
    if version != CHECKPOINT_VERSION:
        raise IncompatibleVersionError(f"checkpoint version {version} is not supported")
    if len(data) < fixed + _DIGEST:
        raise IntegrityError("checkpoint truncated")
    payload, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(payload[fixed:fixed + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None

    offset = fixed + header_len
    arrays = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        size = int(np.prod(shape)) * 8
        if offset + size > len(payload):
            raise IntegrityError(f"tensor {t['name']} runs past the end of the file")
        arrays[t["name"]] = np.frombuffer(payload, dtype="<f8", count=size // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += size
    if offset != len(payload):
        raise IntegrityError("unexpected bytes after the last tensor")
    return Checkpoint(_build_model(header, arrays), header["train_config"], header["seeds"], version)


def _build_model(header, arrays):
    sizes = header["backbone"]["sizes"]
    n_layers = len(sizes) - 1
    backbone = BackboneParams(
        sizes,
        [nx.param(arrays[f"backbone.W{k}"]) for k in range(n_layers)],
        [nx.param(arrays[f"backbone.b{k}"]) for k in range(n_layers)],
    )
    adaptor = None
    if header["adaptor"] is not None:
        a = header["adaptor"]
        names = [t["name"] for t in header["tensors"] if t["name"].startswith("adaptor.")]
        tensors = {n[len("adaptor."):]: nx.param(arrays[n]) for n in names}
        adaptor = AdaptorParams(AdaptorKind.parse(a["kind"]), a["dim"], tensors, a["config"])
    head = SimilarityHead(header["head"]["kind"], header["head"]["temperature"])
    return FewShotModel(backbone, adaptor, head, header["prototype_position"])
