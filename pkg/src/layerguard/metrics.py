"""Detection-quality metrics and norm/proportion sweep protocols.

Average precision integrates the step-interpolated precision-recall curve;
pAUC integrates the tie-grouped trapezoidal ROC up to a false-positive-rate
cap and normalizes by it. Sweeps follow the evaluation protocol of varying
the anomalous proportion over 12 equally spaced values between 0.005 and
min(0.3, available proportion), selecting by perturbation norm (ordered) or
uniformly at random (repeated, median reported).
"""

import math
from dataclasses import dataclass

import numpy as np

SWEEP_POINTS = 12
SWEEP_MIN_PROPORTION = 0.005
SWEEP_MAX_PROPORTION = 0.3


@dataclass
class LabeledScores:
    """Detection scores with natural/anomalous flags and optional norms."""

    scores: np.ndarray
    is_anomalous: np.ndarray
    norms: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_anomalous = np.asarray(self.is_anomalous, dtype=bool)
        if self.scores.shape != self.is_anomalous.shape:
            raise ValueError("scores and labels must have equal length")
        if self.norms is not None:
            self.norms = np.asarray(self.norms, dtype=np.float64)
            if self.norms.shape != (int(self.is_anomalous.sum()),):
                raise ValueError("norms must have one entry per anomalous sample")

    @property
    def num_anomalous(self):
        return int(self.is_anomalous.sum())

    @property
    def num_natural(self):
        return int((~self.is_anomalous).sum())


def _group_counts(scores, labels):
    """Cumulative true/false positives at each distinct threshold, descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # Boundaries where the score changes: these are the usable thresholds.
    distinct = np.nonzero(np.diff(s))[0]
    idx = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(y)[idx].astype(np.float64)
    fp = np.cumsum(~y)[idx].astype(np.float64)
    return tp, fp


def average_precision(ls):
    """Step-interpolated area under the precision-recall curve."""
    pos = ls.num_anomalous
    neg = ls.num_natural
    if pos == 0 or neg == 0:
        raise ValueError("average precision needs both natural and anomalous samples")
    tp, fp = _group_counts(ls.scores, ls.is_anomalous)
    recall = tp / pos
    precision = tp / (tp + fp)
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def pauc(ls, alpha):
    """Partial area under the ROC curve below FPR alpha, normalized to [0, 1]."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    pos = ls.num_anomalous
    neg = ls.num_natural
    if pos == 0 or neg == 0:
        raise ValueError("pAUC needs both natural and anomalous samples")
    tp, fp = _group_counts(ls.scores, ls.is_anomalous)
    tpr = np.concatenate([[0.0], tp / pos])
    fpr = np.concatenate([[0.0], fp / neg])
    area = 0.0
    for i in range(1, fpr.size):
        x0, x1 = fpr[i - 1], fpr[i]
        y0, y1 = tpr[i - 1], tpr[i]
        if x0 >= alpha:
            break
        if x1 <= alpha:
            area += (x1 - x0) * (y0 + y1) / 2.0
        else:
            # Linear interpolation at the alpha cut.
            frac = (alpha - x0) / (x1 - x0)
            y_cut = y0 + frac * (y1 - y0)
            area += (alpha - x0) * (y0 + y_cut) / 2.0
            break
    return float(area / alpha)


def sweep_proportions(max_proportion):
    """12 equally spaced anomalous proportions between 0.005 and the cap."""
    cap = min(SWEEP_MAX_PROPORTION, max_proportion)
    if cap <= 0:
        raise ValueError("no anomalous samples to sweep over")
    lo = min(SWEEP_MIN_PROPORTION, cap)
    return np.linspace(lo, cap, SWEEP_POINTS)


def _mix(ls, anomalous_subset):
    nat = ~ls.is_anomalous
    scores = np.concatenate([ls.scores[nat], ls.scores[ls.is_anomalous][anomalous_subset]])
    labels = np.concatenate(
        [np.zeros(int(nat.sum()), dtype=bool), np.ones(anomalous_subset.size, dtype=bool)]
    )
    return LabeledScores(scores=scores, is_anomalous=labels)


def norm_sweep(ls, pauc_alpha=0.2):
    """Metrics over increasing perturbation-norm prefixes of the anomalous set.

    Anomalous samples are sorted by ascending norm; for each proportion p the
    ceil(p * N) lowest-norm anomalous samples are mixed with all natural
    samples. Rows report the largest selected norm with AP and pAUC.
    """
    if ls.norms is None:
        raise ValueError("norm_sweep requires perturbation norms for anomalous samples")
    if ls.num_anomalous == 0:
        raise ValueError("no anomalous samples")
    n_total = ls.scores.size
    order = np.argsort(ls.norms, kind="stable")
    rows = []
    for p in sweep_proportions(ls.num_anomalous / n_total):
        take = min(ls.num_anomalous, max(1, math.ceil(p * n_total)))
        subset = order[:take]
        mixed = _mix(ls, subset)
        rows.append(
            {
                "max_norm": float(ls.norms[subset].max()),
                "proportion": float(p),
                "average_precision": average_precision(mixed),
                "pauc": pauc(mixed, pauc_alpha),
            }
        )
    return rows


def proportion_sweep(ls, proportions=None, repeats=100, seed=0, pauc_alpha=0.2):
    """Median metrics over random anomalous subsets at each proportion."""
    if ls.num_anomalous == 0:
        raise ValueError("no anomalous samples")
    n_total = ls.scores.size
    if proportions is None:
        proportions = sweep_proportions(ls.num_anomalous / n_total)
    rng = np.random.default_rng(seed)
    anom_ids = np.arange(ls.num_anomalous)
    rows = []
    for p in proportions:
        take = min(ls.num_anomalous, max(1, math.ceil(p * n_total)))
        aps, paucs = [], []
        for _ in range(repeats):
            subset = rng.choice(anom_ids, size=take, replace=False)
            mixed = _mix(ls, subset)
            aps.append(average_precision(mixed))
            paucs.append(pauc(mixed, pauc_alpha))
        rows.append(
            {
                "proportion": float(p),
                "average_precision": float(np.median(aps)),
                "pauc": float(np.median(paucs)),
            }
        )
    return rows
