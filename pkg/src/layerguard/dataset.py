"""Portable on-disk layer-representation datasets.

A dataset is a directory with a JSON manifest and raw binary blobs: one
float32 little-endian row-major matrix per layer, plus uint16 little-endian
true/predicted label vectors. The same format is written by the network
exporters and read back by the detection pipeline, so loads are strict and
every violation gets its own diagnostic.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1
LAYER_DTYPE = "f32le"
LABEL_DTYPE = "u16le"

_F32 = np.dtype("<f4")
_U16 = np.dtype("<u2")


class DatasetFormatError(ValueError):
    """A dataset directory violates the on-disk format contract."""


@dataclass(frozen=True)
class LayerBlock:
    """One layer's representations: an N x dim matrix of finite floats."""

    name: str
    dim: int
    matrix: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise DatasetFormatError(f"layer '{self.name}': dim must be >= 1, got {self.dim}")
        if self.matrix.ndim != 2 or self.matrix.shape[1] != self.dim:
            raise DatasetFormatError(
                f"layer '{self.name}': matrix shape {self.matrix.shape} does not match dim {self.dim}"
            )
        if not np.isfinite(self.matrix).all():
            raise DatasetFormatError(f"layer '{self.name}': non-finite value in matrix")


class LayerDataset:
    """In-memory augmented dataset: per-layer representations plus labels.

    Layer index 0 is the input representation. All layers hold exactly
    ``num_samples`` rows; labels are 0-based class indices below
    ``num_classes``.
    """

    def __init__(self, layers, true_labels, pred_labels, num_classes):
        if not layers:
            raise DatasetFormatError("dataset must have at least one layer")
        true_labels = np.asarray(true_labels, dtype=np.int64)
        pred_labels = np.asarray(pred_labels, dtype=np.int64)
        n = layers[0].matrix.shape[0]
        for blk in layers:
            if blk.matrix.shape[0] != n:
                raise DatasetFormatError(
                    f"layer '{blk.name}' has {blk.matrix.shape[0]} rows, expected {n}"
                )
        for kind, labels in (("true", true_labels), ("pred", pred_labels)):
            if labels.shape != (n,):
                raise DatasetFormatError(f"{kind} labels have shape {labels.shape}, expected ({n},)")
            if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
                bad = labels[(labels < 0) | (labels >= num_classes)][0]
                raise DatasetFormatError(
                    f"{kind} label {bad} out of range for num_classes={num_classes}"
                )
        self.layers = list(layers)
        self.true_labels = true_labels
        self.pred_labels = pred_labels
        self.num_classes = int(num_classes)
        self.num_samples = int(n)

    @property
    def num_layers(self):
        return len(self.layers)

    def layer_names(self):
        return [blk.name for blk in self.layers]

    def layer_dims(self):
        return [blk.dim for blk in self.layers]

    def subset(self, indices):
        """New dataset restricted to the given sample indices (row order kept)."""
        indices = np.asarray(indices, dtype=np.int64)
        layers = [LayerBlock(b.name, b.dim, b.matrix[indices]) for b in self.layers]
        return LayerDataset(layers, self.true_labels[indices], self.pred_labels[indices], self.num_classes)


@dataclass(frozen=True)
class FoldSplit:
    """Class-stratified fold assignment: fold index per sample."""

    assignments: np.ndarray
    num_folds: int

    def fold_indices(self, fold):
        return np.nonzero(self.assignments == fold)[0]

    def rest_indices(self, fold):
        return np.nonzero(self.assignments != fold)[0]


@dataclass(frozen=True)
class ValidationReport:
    num_samples: int
    num_classes: int
    layer_dims: dict
    true_class_counts: np.ndarray
    pred_class_counts: np.ndarray
    accuracy: float

    def lines(self):
        out = [
            f"samples: {self.num_samples}",
            f"classes: {self.num_classes}",
            "layers: " + ", ".join(f"{k}({v})" for k, v in self.layer_dims.items()),
            "true-class counts: " + " ".join(str(c) for c in self.true_class_counts),
            "pred-class counts: " + " ".join(str(c) for c in self.pred_class_counts),
            f"classifier accuracy: {self.accuracy:.4f}",
        ]
        return out


def _read_blob(path, dtype, what):
    if not os.path.isfile(path):
        raise DatasetFormatError(f"{what}: blob file not found: {path}")
    return np.fromfile(path, dtype=dtype)


def load_dataset(path):
    """Load and validate a dataset directory. Raises DatasetFormatError."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise DatasetFormatError(f"missing manifest: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            man = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"manifest is not valid JSON: {exc}") from exc

    version = man.get("version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported manifest version: {version!r}")
    if man.get("dtype") != LAYER_DTYPE or man.get("label_dtype") != LABEL_DTYPE:
        raise DatasetFormatError(
            f"unsupported dtypes: {man.get('dtype')!r}/{man.get('label_dtype')!r}"
        )
    try:
        n = int(man["num_samples"])
        m = int(man["num_classes"])
        layer_entries = man["layers"]
        true_file = man["true_labels_file"]
        pred_file = man["pred_labels_file"]
    except KeyError as exc:
        raise DatasetFormatError(f"manifest missing required key: {exc}") from exc
    if not layer_entries:
        raise DatasetFormatError("manifest declares no layers")

    layers = []
    for entry in layer_entries:
        name, dim, fname = entry["name"], int(entry["dim"]), entry["file"]
        raw = _read_blob(os.path.join(path, fname), _F32, f"layer '{name}'")
        if raw.size != n * dim:
            raise DatasetFormatError(
                f"layer '{name}': blob holds {raw.size} values, expected {n}x{dim}={n * dim}"
            )
        mat = raw.reshape(n, dim).astype(np.float64)
        if not np.isfinite(mat).all():
            raise DatasetFormatError(f"layer '{name}': non-finite value in blob")
        layers.append(LayerBlock(name, dim, mat))

    labels = []
    for kind, fname in (("true", true_file), ("pred", pred_file)):
        raw = _read_blob(os.path.join(path, fname), _U16, f"{kind} labels")
        if raw.size != n:
            raise DatasetFormatError(f"{kind} labels: {raw.size} entries, expected {n}")
        labels.append(raw.astype(np.int64))

    return LayerDataset(layers, labels[0], labels[1], m)


def write_dataset(ds, path):
    """Write a dataset directory in canonical form (fixed file names/order).

    Layer matrices are quantized to little-endian float32 at write time;
    round-tripping a loaded dataset reproduces the blobs byte for byte.
    """
    os.makedirs(path, exist_ok=True)
    entries = []
    for i, blk in enumerate(ds.layers):
        fname = f"layer_{i:02d}.f32"
        blk.matrix.astype(_F32).tofile(os.path.join(path, fname))
        entries.append({"name": blk.name, "dim": blk.dim, "file": fname})
    ds.true_labels.astype(_U16).tofile(os.path.join(path, "true_labels.u16"))
    ds.pred_labels.astype(_U16).tofile(os.path.join(path, "pred_labels.u16"))
    man = {
        "version": FORMAT_VERSION,
        "num_samples": ds.num_samples,
        "num_classes": ds.num_classes,
        "layers": entries,
        "true_labels_file": "true_labels.u16",
        "pred_labels_file": "pred_labels.u16",
        "dtype": LAYER_DTYPE,
        "label_dtype": LABEL_DTYPE,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def split_folds(ds_or_labels, num_folds, seed):
    """Class-stratified fold split, deterministic given the seed.

    Stratifies by true label; per-class fold sizes differ by at most one.
    Raises ValueError when a class has fewer samples than folds.
    """
    if isinstance(ds_or_labels, LayerDataset):
        labels = ds_or_labels.true_labels
    else:
        labels = np.asarray(ds_or_labels, dtype=np.int64)
    if num_folds < 2:
        raise ValueError(f"num_folds must be >= 2, got {num_folds}")
    rng = np.random.default_rng(seed)
    assignments = np.full(labels.shape[0], -1, dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        if idx.size < num_folds:
            raise ValueError(
                f"class {cls} has {idx.size} samples, fewer than {num_folds} folds"
            )
        # Permute within class, then deal out round-robin so counts differ by <= 1.
        perm = rng.permutation(idx.size)
        assignments[idx[perm]] = np.arange(idx.size) % num_folds
    return FoldSplit(assignments=assignments, num_folds=num_folds)


def validate_dataset(ds):
    """Summarize a dataset; reports issues as numbers rather than failing."""
    m = ds.num_classes
    true_counts = np.bincount(ds.true_labels, minlength=m)
    pred_counts = np.bincount(ds.pred_labels, minlength=m)
    if ds.num_samples:
        acc = float(np.mean(ds.true_labels == ds.pred_labels))
    else:
        acc = float("nan")
    return ValidationReport(
        num_samples=ds.num_samples,
        num_classes=m,
        layer_dims={b.name: b.dim for b in ds.layers},
        true_class_counts=true_counts,
        pred_class_counts=pred_counts,
        accuracy=acc,
    )
