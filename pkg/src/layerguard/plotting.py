"""Static figures for the evaluation reports.

Everything renders through the Agg backend straight to files; PNG metadata
is stripped so identical runs produce identical bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _new_axes(xlabel, ylabel, title):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return fig, ax


def plot_sweep(rows, x_key, out_path, title, xlabel):
    """AP and pAUC curves over a sweep; one line per metric."""
    x = [r[x_key] for r in rows]
    fig, ax = _new_axes(xlabel, "metric value", title)
    ax.plot(x, [r["average_precision"] for r in rows], marker="o", label="average precision")
    ax.plot(x, [r["pauc"] for r in rows], marker="s", label="pAUC")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)
    return out_path


def plot_score_groups(groups, out_path, title, xlabel="score"):
    """Overlaid score histograms, one per named group (empty groups skipped)."""
    groups = {k: np.asarray(v) for k, v in groups.items() if np.asarray(v).size}
    fig, ax = _new_axes(xlabel, "density", title)
    finite = np.concatenate([v[np.isfinite(v)] for v in groups.values()]) if groups else np.array([])
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    bins = np.linspace(lo, hi if hi > lo else lo + 1.0, 40)
    for name, values in groups.items():
        ax.hist(values, bins=bins, density=True, alpha=0.5, label=name)
    if groups:
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)
    return out_path


def plot_pr_curve(ls, out_path, title):
    """Precision-recall curve over distinct score thresholds."""
    scores = ls.scores
    labels = ls.is_anomalous
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    s = scores[order]
    distinct = np.nonzero(np.diff(s))[0]
    idx = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(y)[idx]
    fp = np.cumsum(~y)[idx]
    recall = tp / max(1, labels.sum())
    precision = tp / (tp + fp)
    fig, ax = _new_axes("recall", "precision", title)
    ax.step(np.concatenate([[0.0], recall]), np.concatenate([[1.0], precision]), where="post")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)
    return out_path
