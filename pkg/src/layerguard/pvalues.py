"""Empirical p-values from calibration nulls and their combination.

Univariate and layer-pair p-values are right-tailed empirical exceedance
probabilities with add-one smoothing, (1 + count) / (n + 1), averaged over
seeded bootstrap resamples of the null. Combination is Fisher's log-sum,
the weighted harmonic mean, or the multivariate aK-LPE estimator over the
whole statistic vector.

All combined values are carried in natural-log space; Fisher sums are never
exponentiated.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .knn import default_k

DEFAULT_BOOTSTRAPS = 100
MIN_NULL_COUNT = 20

CONDITIONINGS = ("pred", "true")


def _resampled_tail(count, n, num_bootstraps, rng):
    """Mean over bootstrap resamples of (1 + exceedances) / (n + 1).

    Each resample draws n values with replacement from the null, so its
    exceedance count is Binomial(n, count / n); sampling the counts directly
    is an exact shortcut.
    """
    if num_bootstraps <= 0:
        return (1.0 + count) / (n + 1.0)
    draws = rng.binomial(n, count / n, size=num_bootstraps) if 0 < count < n else np.full(num_bootstraps, count)
    return float(np.mean((1.0 + draws) / (n + 1.0)))


def empirical_pvalue(t, null_values, num_bootstraps=0, rng=None):
    """Right-tailed empirical p-value of t against a null sample."""
    null_values = np.asarray(null_values, dtype=np.float64)
    n = null_values.size
    if n == 0:
        raise ValueError("empty null sample")
    if num_bootstraps > 0 and rng is None:
        rng = np.random.default_rng(0)
    count = int(np.count_nonzero(null_values >= t))
    return _resampled_tail(count, n, num_bootstraps, rng)


def bivariate_pvalue(t1, t2, null_pairs, num_bootstraps=0, rng=None):
    """Joint right-tail exceedance p-value for a pair of statistics."""
    null_pairs = np.asarray(null_pairs, dtype=np.float64)
    if null_pairs.ndim != 2 or null_pairs.shape[1] != 2 or null_pairs.shape[0] == 0:
        raise ValueError("null_pairs must be a non-empty (n, 2) array")
    if num_bootstraps > 0 and rng is None:
        rng = np.random.default_rng(0)
    n = null_pairs.shape[0]
    count = int(np.count_nonzero((null_pairs[:, 0] >= t1) & (null_pairs[:, 1] >= t2)))
    return _resampled_tail(count, n, num_bootstraps, rng)


def fisher_combine(pvalues):
    """Log of the Fisher-combined p-value: the sum of log p over the tests."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no p-values to combine")
    if np.any(p <= 0):
        raise ValueError("zero p-value; add-one smoothing should prevent this")
    return float(np.sum(np.log(p)))


def hmp_combine(pvalues, weights=None):
    """Weighted harmonic mean of p-values; equal weights by default."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no p-values to combine")
    if np.any(p <= 0):
        raise ValueError("zero p-value in harmonic mean")
    if weights is None:
        w = np.full(p.size, 1.0 / p.size)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != p.shape or np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-9):
            raise ValueError("weights must be non-negative and sum to 1")
    return float(1.0 / np.sum(w / p))


def aklpe_score(t_vec, reference, k):
    """aK-LPE score: mean of the ceil(k/2)-th and ceil(3k/2)-th neighbor distances.

    Euclidean distances from the statistic vector to the reference rows,
    with one exact-duplicate row (the vector itself when it belongs to the
    reference) excluded before taking order statistics.
    """
    ref = np.asarray(reference, dtype=np.float64)
    t_vec = np.asarray(t_vec, dtype=np.float64)
    lo = math.ceil(k / 2)
    hi = math.ceil(3 * k / 2)
    if ref.shape[0] < hi + 1:
        raise ValueError(f"reference has {ref.shape[0]} rows; need at least {hi + 1}")
    diff = ref - t_vec
    d = np.sqrt(np.sum(diff * diff, axis=1))
    dup = np.nonzero(d == 0.0)[0]
    for j in dup:
        if np.array_equal(ref[j], t_vec):
            d = np.delete(d, j)
            break
    d.sort()
    return 0.5 * (d[lo - 1] + d[hi - 1])


def aklpe_pvalue(g, null_scores, num_bootstraps=0, rng=None):
    """Right-tail empirical p-value of an aK-LPE score against null scores."""
    return empirical_pvalue(g, null_scores, num_bootstraps=num_bootstraps, rng=rng)


@dataclass
class NullCell:
    """Null statistic vectors for one (conditioning, class) cell."""

    stats: np.ndarray        # (n_members, n_tests)
    sample_ids: np.ndarray   # calibration row ids aligned with stats rows
    aklpe_k: int = 0
    aklpe_null_scores: np.ndarray | None = None
    aklpe_score_ids: np.ndarray | None = None

    def member_mask(self, exclude_id):
        if exclude_id is None:
            return None
        mask = self.sample_ids != exclude_id
        return mask if not mask.all() else None


@dataclass
class EmpiricalNull:
    """Calibration nulls per (conditioning, class): full statistic matrices.

    Univariate nulls are columns, pair nulls are column pairs, and the
    aK-LPE reference is the whole matrix, so one bank serves every combiner.
    """

    cells: dict
    kinds: tuple
    num_layers: int
    num_classes: int
    min_count: int = MIN_NULL_COUNT
    notes: list = field(default_factory=list)

    def cell(self, conditioning, cls):
        key = (conditioning, int(cls))
        if key not in self.cells:
            raise KeyError(f"missing null cell {key}")
        return self.cells[key]

    def validate(self):
        for (cond, cls), cell in sorted(self.cells.items()):
            if cell.stats.shape[0] < self.min_count:
                raise ValueError(
                    f"null cell ({cond}, {cls}) has {cell.stats.shape[0]} samples; "
                    f"minimum is {self.min_count}"
                )


def build_null_bank(t_pred, t_true, pred_labels, true_labels, kinds, num_layers,
                    num_classes, min_count=MIN_NULL_COUNT, aklpe=False, aklpe_k=None):
    """Assemble the null bank from leave-one-out calibration statistics.

    The "pred" cell for class c collects t_pred vectors of samples predicted
    into c; the "true" cell collects t_true[c] vectors of samples labeled c.
    """
    cells = {}
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    for c in range(num_classes):
        for cond, labels, stats in (
            ("pred", pred_labels, t_pred),
            ("true", true_labels, None),
        ):
            members = np.nonzero(labels == c)[0]
            if members.size == 0:
                raise ValueError(f"no calibration samples for ({cond}, class {c})")
            mat = t_pred[members] if cond == "pred" else t_true[members, c, :]
            cell = NullCell(stats=np.ascontiguousarray(mat), sample_ids=members.astype(np.int64))
            if aklpe:
                k_cell = aklpe_k or default_k(members.size)
                need = math.ceil(3 * k_cell / 2) + 1
                if members.size < need:
                    raise ValueError(
                        f"aK-LPE cell ({cond}, {c}) needs at least {need} rows, has {members.size}"
                    )
                scores = np.array(
                    [aklpe_score(cell.stats[i], cell.stats, k_cell) for i in range(members.size)]
                )
                cell.aklpe_k = k_cell
                cell.aklpe_null_scores = scores
                cell.aklpe_score_ids = cell.sample_ids
            cells[(cond, c)] = cell
    bank = EmpiricalNull(
        cells=cells, kinds=tuple(kinds), num_layers=num_layers,
        num_classes=num_classes, min_count=min_count,
    )
    bank.validate()
    return bank


def layer_pairs(kinds, num_layers):
    """Column-index pairs for all distinct layer pairs within each kind."""
    pairs = []
    for ki in range(len(kinds)):
        base = ki * num_layers
        for l1 in range(num_layers):
            for l2 in range(l1 + 1, num_layers):
                pairs.append((base + l1, base + l2))
    return pairs


def default_use_pairs(num_layers):
    """Layer pairs are included only when the layer count is small."""
    return num_layers <= 8


@dataclass
class PValueBundle:
    """Combined p-values (natural log) for one sample."""

    log_q_pred: float
    log_q_true: np.ndarray
    combiner: str


def _cell_pvalues(stat_vec, cell, pairs, num_bootstraps, rng, exclude_id):
    mask = cell.member_mask(exclude_id)
    stats = cell.stats if mask is None else cell.stats[mask]
    pvals = [
        empirical_pvalue(stat_vec[t], stats[:, t], num_bootstraps, rng)
        for t in range(stat_vec.shape[0])
    ]
    for t1, t2 in pairs:
        pvals.append(
            bivariate_pvalue(stat_vec[t1], stat_vec[t2], stats[:, (t1, t2)], num_bootstraps, rng)
        )
    return np.array(pvals)


def _combine_cell(stat_vec, cell, method, pairs, num_bootstraps, rng, exclude_id):
    if method == "aklpe":
        g = aklpe_score(stat_vec, cell.stats, cell.aklpe_k)
        mask = None
        if exclude_id is not None and cell.aklpe_score_ids is not None:
            m = cell.aklpe_score_ids != exclude_id
            mask = m if not m.all() else None
        scores = cell.aklpe_null_scores if mask is None else cell.aklpe_null_scores[mask]
        return math.log(aklpe_pvalue(g, scores, num_bootstraps, rng))
    pvals = _cell_pvalues(stat_vec, cell, pairs, num_bootstraps, rng, exclude_id)
    if method == "fisher":
        return fisher_combine(pvals)
    if method == "hmp":
        return math.log(hmp_combine(pvals))
    raise ValueError(f"unknown combiner: {method!r}")


def combine_bundle(stats, nulls, method="fisher", use_pairs=None,
                   num_bootstraps=DEFAULT_BOOTSTRAPS, rng=None, exclude_id=None):
    """Combined p-values for one statistic bundle against the null bank.

    use_pairs=None enables layer pairs automatically for fisher/hmp when the
    layer count is small; the aK-LPE combiner never uses pairs.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if use_pairs is None:
        use_pairs = default_use_pairs(stats.num_layers)
    pairs = []
    if method in ("fisher", "hmp") and use_pairs:
        pairs = layer_pairs(stats.kinds, stats.num_layers)

    log_q_pred = _combine_cell(
        stats.t_pred, nulls.cell("pred", stats.pred_class), method, pairs,
        num_bootstraps, rng, exclude_id,
    )
    log_q_true = np.empty(nulls.num_classes)
    for c in range(nulls.num_classes):
        log_q_true[c] = _combine_cell(
            stats.t_true[c], nulls.cell("true", c), method, pairs,
            num_bootstraps, rng, exclude_id,
        )
    return PValueBundle(log_q_pred=log_q_pred, log_q_true=log_q_true, combiner=method)
