"""A small fully-connected network with exact forward and reverse passes.

The network computes everything in double precision so gradient checks are
stable; dataset export quantizes to float32 exactly once. Scalar functions
of the forward trace supply cotangents (one per traced layer), which the
reverse pass accumulates into an exact input gradient. That is all the
attack path needs, with no deep-learning framework involved.
"""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .dataset import LayerBlock, LayerDataset

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "identity")
_NET_VERSION = 1


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z):
    if name == "relu":
        return (z > 0.0).astype(np.float64)  # subgradient 0 at the kink
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardTrace:
    """Per-layer activations of one input, ending at the logits."""

    layers: list
    logits: np.ndarray
    probs: np.ndarray
    pred_class: int


class ToyNetwork:
    """Dense feed-forward classifier with hidden activations and raw logits."""

    def __init__(self, layer_sizes, activations=None, seed=0, input_range=(0.0, 1.0)):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and logit sizes")
        n_affine = len(layer_sizes) - 1
        if activations is None:
            activations = ["tanh"] * (n_affine - 1)
        if len(activations) != n_affine - 1:
            raise ValueError(f"need {n_affine - 1} hidden activations, got {len(activations)}")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation: {a!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.activations = list(activations)
        self.input_range = (float(input_range[0]), float(input_range[1]))
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for i in range(n_affine):
            fan_in, fan_out = self.layer_sizes[i], self.layer_sizes[i + 1]
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def num_classes(self):
        return self.layer_sizes[-1]

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def num_trace_layers(self):
        # input + each hidden activation + logits
        return len(self.layer_sizes)

    def _act_name(self, affine_index):
        n_affine = len(self.weights)
        return self.activations[affine_index] if affine_index < n_affine - 1 else "identity"

    def forward_batch(self, x):
        """All activations for a batch: (acts, pre_acts); acts[0] is the input."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"input shape {x.shape} incompatible with dim {self.input_dim}")
        acts = [x]
        pre = []
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            pre.append(z)
            acts.append(_act(self._act_name(j), z))
        return acts, pre

    def backward_batch(self, acts, pre, cotangents):
        """Input gradient plus parameter gradients from trace cotangents.

        cotangents[i] pairs with acts[i]; entries may be None for zero.
        """
        n_affine = len(self.weights)
        grad_w = [None] * n_affine
        grad_b = [None] * n_affine
        g = cotangents[n_affine]
        if g is None:
            g = np.zeros_like(acts[n_affine])
        for j in range(n_affine - 1, -1, -1):
            gz = g * _act_grad(self._act_name(j), pre[j])
            grad_w[j] = acts[j].T @ gz
            grad_b[j] = gz.sum(axis=0)
            g = gz @ self.weights[j].T
            if cotangents[j] is not None:
                g = g + cotangents[j]
        return g, grad_w, grad_b

    def copy(self):
        dup = ToyNetwork.__new__(ToyNetwork)
        dup.layer_sizes = list(self.layer_sizes)
        dup.activations = list(self.activations)
        dup.input_range = self.input_range
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup


def forward(net, x):
    """Forward trace of a single input."""
    acts, _ = net.forward_batch(np.asarray(x, dtype=np.float64)[None, :])
    logits = acts[-1][0]
    probs = softmax(logits)
    return ForwardTrace(
        layers=[a[0] for a in acts],
        logits=logits,
        probs=probs,
        pred_class=int(np.argmax(logits)),
    )


def input_gradient(net, x, scalar_fn):
    """Exact gradient of scalar_fn(trace) with respect to the input.

    scalar_fn receives the ForwardTrace and returns (value, cotangents)
    where cotangents[i] is the partial derivative of the value with respect
    to trace layer i (None for layers it does not touch).
    """
    x = np.asarray(x, dtype=np.float64)
    acts, pre = net.forward_batch(x[None, :])
    logits = acts[-1][0]
    trace = ForwardTrace(
        layers=[a[0] for a in acts],
        logits=logits,
        probs=softmax(logits),
        pred_class=int(np.argmax(logits)),
    )
    value, cots = scalar_fn(trace)
    if len(cots) != len(acts):
        raise ValueError(f"expected {len(acts)} cotangents, got {len(cots)}")
    cots = [None if c is None else np.asarray(c, dtype=np.float64)[None, :] for c in cots]
    grad, _, _ = net.backward_batch(acts, pre, cots)
    return value, grad[0]


def cross_entropy(net, x, labels):
    """Mean cross-entropy and batch softmax probabilities."""
    acts, pre = net.forward_batch(x)
    probs = softmax(acts[-1])
    n = x.shape[0]
    ll = -np.log(np.maximum(probs[np.arange(n), labels], 1e-300))
    return float(ll.mean()), probs, acts, pre


def train_toy(net, data, labels, epochs=200, lr=0.05, seed=0, batch_size=32):
    """Mini-batch SGD on cross-entropy; deterministic given the seed.

    Returns a trained copy; raises on divergence naming the last finite
    epoch. Final train accuracy is logged.
    """
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    net = net.copy()
    rng = np.random.default_rng(seed)
    n = data.shape[0]
    last_finite = -1
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            xb, yb = data[batch], labels[batch]
            acts, pre = net.forward_batch(xb)
            probs = softmax(acts[-1])
            gl = probs.copy()
            gl[np.arange(batch.size), yb] -= 1.0
            gl /= batch.size
            cots = [None] * (len(acts) - 1) + [gl]
            _, gw, gb = net.backward_batch(acts, pre, cots)
            for j in range(len(net.weights)):
                net.weights[j] -= lr * gw[j]
                net.biases[j] -= lr * gb[j]
        loss, _, _, _ = cross_entropy(net, data, labels)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"training diverged at epoch {epoch} (last finite epoch: {last_finite})"
            )
        last_finite = epoch
    acc = accuracy(net, data, labels)
    logger.info("train accuracy after %d epochs: %.4f", epochs, acc)
    return net


def accuracy(net, data, labels):
    acts, _ = net.forward_batch(np.asarray(data, dtype=np.float64))
    pred = np.argmax(acts[-1], axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def predict(net, data):
    acts, _ = net.forward_batch(np.asarray(data, dtype=np.float64))
    return np.argmax(acts[-1], axis=1)


def export_representations(net, data, labels, layer_names=None):
    """LayerDataset of all trace layers, float32-quantized once at export."""
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    acts, _ = net.forward_batch(data)
    pred = np.argmax(acts[-1], axis=1)
    if layer_names is None:
        hidden = [f"hidden{j}" for j in range(1, len(acts) - 1)]
        layer_names = ["input"] + hidden + ["logits"]
    if len(layer_names) != len(acts):
        raise ValueError(f"need {len(acts)} layer names, got {len(layer_names)}")
    blocks = []
    for name, mat in zip(layer_names, acts):
        q = mat.astype(np.float32).astype(np.float64)
        blocks.append(LayerBlock(name=name, dim=mat.shape[1], matrix=q))
    return LayerDataset(blocks, labels, pred, net.num_classes)


def save_network(net, path):
    """Write manifest plus float64 weight blobs."""
    os.makedirs(path, exist_ok=True)
    man = {
        "version": _NET_VERSION,
        "layer_sizes": net.layer_sizes,
        "activations": net.activations,
        "input_range": list(net.input_range),
    }
    with open(os.path.join(path, "network.json"), "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for j, (w, b) in enumerate(zip(net.weights, net.biases)):
        w.astype("<f8").tofile(os.path.join(path, f"weight_{j:02d}.f64"))
        b.astype("<f8").tofile(os.path.join(path, f"bias_{j:02d}.f64"))


def load_network(path):
    with open(os.path.join(path, "network.json"), "r", encoding="utf-8") as fh:
        man = json.load(fh)
    if man.get("version") != _NET_VERSION:
        raise ValueError(f"unsupported network version: {man.get('version')!r}")
    net = ToyNetwork(man["layer_sizes"], man["activations"], input_range=man["input_range"])
    for j in range(len(net.weights)):
        w = np.fromfile(os.path.join(path, f"weight_{j:02d}.f64"), dtype="<f8")
        b = np.fromfile(os.path.join(path, f"bias_{j:02d}.f64"), dtype="<f8")
        net.weights[j] = w.reshape(net.layer_sizes[j], net.layer_sizes[j + 1])
        net.biases[j] = b
    return net
