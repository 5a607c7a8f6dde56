"""Forward-hook extraction of layer activations to the dataset format.

The output directory holds manifest.json plus raw little-endian blobs:
float32 row-major matrices per layer and uint16 label vectors. The format
mirrors the detection toolkit's dataset contract byte for byte, so the
directory loads there directly. Extraction follows dataset order with no
shuffling; float32 quantization happens exactly once, at write time.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

FORMAT_VERSION = 1
LAYER_DTYPE = "f32le"
LABEL_DTYPE = "u16le"


class ExtractionError(RuntimeError):
    pass


@dataclass
class ExtractionSpec:
    """What to capture and where to write it."""

    layer_names: list
    out_dir: str
    batch_size: int = 64
    include_input: bool = True
    input_name: str = "input"
    logits_name: str = "logits"
    include_logits: bool = True

    def __post_init__(self):
        if not self.layer_names and not self.include_input and not self.include_logits:
            raise ExtractionError("nothing to extract: no layers requested")
        if self.batch_size < 1:
            raise ExtractionError(f"batch size must be positive, got {self.batch_size}")


def _flatten(tensor):
    # Row-major flattening of whatever trails the batch dimension.
    return tensor.detach().reshape(tensor.shape[0], -1).cpu().numpy()


def extract(model, data, labels, spec):
    """Run the model over the data and write the dataset directory.

    data: (N, ...) array or tensor of inputs; labels: (N,) true classes.
    Predicted labels are the argmax of the model outputs. Returns the
    output directory path.
    """
    x = torch.as_tensor(np.asarray(data), dtype=torch.float32)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ExtractionError(f"{x.shape[0]} inputs but {y.shape[0]} labels")

    named = dict(model.named_modules())
    missing = [name for name in spec.layer_names if name not in named]
    if missing:
        available = sorted(k for k in named if k)
        raise ExtractionError(f"unknown layer name(s) {missing}; model has {available}")

    captured = {name: [] for name in spec.layer_names}
    handles = []

    def make_hook(name):
        def hook(_module, _inputs, output):
            if not torch.is_tensor(output):
                raise ExtractionError(f"layer '{name}' produced a non-tensor output")
            captured[name].append(_flatten(output))

        return hook

    for name in spec.layer_names:
        handles.append(named[name].register_forward_hook(make_hook(name)))

    inputs_flat, logits_parts = [], []
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, x.shape[0], spec.batch_size):
                batch = x[start : start + spec.batch_size]
                out = model(batch)
                inputs_flat.append(_flatten(batch))
                logits_parts.append(_flatten(out))
    finally:
        for h in handles:
            h.remove()

    logits = np.concatenate(logits_parts, axis=0)
    num_classes = logits.shape[1]
    pred = np.argmax(logits, axis=1)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ExtractionError(
            f"label out of range [0, {num_classes}) for the model's output width"
        )

    blocks = []
    if spec.include_input:
        blocks.append((spec.input_name, np.concatenate(inputs_flat, axis=0)))
    for name in spec.layer_names:
        blocks.append((name, np.concatenate(captured[name], axis=0)))
    if spec.include_logits:
        blocks.append((spec.logits_name, logits))

    for name, mat in blocks:
        if not np.isfinite(mat).all():
            raise ExtractionError(f"non-finite activation in layer '{name}'")
        if mat.shape[0] != y.size:
            raise ExtractionError(
                f"layer '{name}' captured {mat.shape[0]} rows for {y.size} samples"
            )

    return _write(blocks, y, pred, num_classes, spec.out_dir)


def _write(blocks, true_labels, pred_labels, num_classes, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, (name, mat) in enumerate(blocks):
        fname = f"layer_{i:02d}.f32"
        mat.astype("<f4").tofile(os.path.join(out_dir, fname))
        entries.append({"name": name, "dim": int(mat.shape[1]), "file": fname})
    true_labels.astype("<u2").tofile(os.path.join(out_dir, "true_labels.u16"))
    pred_labels.astype("<u2").tofile(os.path.join(out_dir, "pred_labels.u16"))
    manifest = {
        "version": FORMAT_VERSION,
        "num_samples": int(true_labels.size),
        "num_classes": int(num_classes),
        "layers": entries,
        "true_labels_file": "true_labels.u16",
        "pred_labels_file": "pred_labels.u16",
        "dtype": LAYER_DTYPE,
        "label_dtype": LABEL_DTYPE,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir
