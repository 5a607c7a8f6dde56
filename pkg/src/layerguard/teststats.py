"""Class-conditional test statistics at the classifier layers.

Every statistic is a non-negative scalar per (sample, layer) where larger
means less conforming to the reference distribution. Statistics are computed
twice: conditioned on the predicted class (against the population predicted
into that class) and conditioned on each candidate true class (against the
population labeled with that class).

Kinds:
  multinomial  likelihood-ratio statistic of kNN class counts against
               MAP-fitted multinomial parameters
  binomial     fraction of k nearest neighbors not from the class
  trust        inverted trust score: distance to the class's point set over
               the nearest other class's set
  lid          local intrinsic dimension estimate within the class's set
  adist        average distance to the k nearest neighbors from the class

Neighbor class counts always use the true labels of the reference samples;
the conditioning (predicted vs. true) selects which reference population a
statistic is compared against.
"""

from dataclasses import dataclass

import numpy as np

from .knn import build_index, class_counts, default_k

STAT_KINDS = ("multinomial", "binomial", "trust", "lid", "adist")

# Finite stand-ins for degenerate LID neighborhoods: all-duplicate sets are
# maximally conforming, equidistant shells maximally non-conforming.
LID_DEGENERATE_LOW = 0.0
LID_DEGENERATE_HIGH = 1e6


@dataclass(frozen=True)
class MultinomialModel:
    """MAP multinomial parameters for kNN class counts.

    pi_pred[l, c] is the probability vector for layer l conditioned on
    predicted class c; pi_true[l, c] conditions on true class c.
    """

    pi_pred: np.ndarray
    pi_true: np.ndarray
    prior_count: float

    def __post_init__(self):
        for name, arr in (("pi_pred", self.pi_pred), ("pi_true", self.pi_true)):
            if arr.ndim != 3:
                raise ValueError(f"{name} must be (layers, classes, classes)")
            if np.any(arr < 0):
                raise ValueError(f"{name} has negative entries")
            if not np.allclose(arr.sum(axis=2), 1.0, atol=1e-9):
                raise ValueError(f"{name} rows do not sum to 1")
            if self.prior_count > 0 and np.any(arr <= 0):
                raise ValueError(f"{name} has zero entries despite positive prior")

    @property
    def num_layers(self):
        return self.pi_pred.shape[0]

    @property
    def num_classes(self):
        return self.pi_pred.shape[1]


def neighbor_class_counts(layer_mats, true_labels, k, metric="cosine", loo=True, indexes=None):
    """kNN class counts per layer for every sample: (L, N, m) int array."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    m = int(true_labels.max()) + 1
    out = []
    for li, mat in enumerate(layer_mats):
        index = indexes[li] if indexes is not None else build_index(mat, metric=metric)
        idx, _ = index.query_many(mat, k, exclude_self=loo)
        votes = true_labels[idx]
        counts = np.zeros((mat.shape[0], m), dtype=np.int64)
        for c in range(m):
            counts[:, c] = np.sum(votes == c, axis=1)
        out.append(counts)
    return np.stack(out, axis=0)


def fit_multinomial_from_counts(counts, pred_labels, true_labels, m, prior_count=0.5):
    """MAP multinomial estimates from precomputed neighbor counts.

    counts: (L, N, m). Raises when a (layer, class) cell is empty under
    either labeling, naming the cell.
    """
    counts = np.asarray(counts)
    n_layers = counts.shape[0]
    pi = {"pred": np.empty((n_layers, m, m)), "true": np.empty((n_layers, m, m))}
    for labeling, labels in (("pred", np.asarray(pred_labels)), ("true", np.asarray(true_labels))):
        for c in range(m):
            members = labels == c
            if not members.any():
                raise ValueError(f"empty cell: no {labeling}-labeled samples for class {c}")
            for l in range(n_layers):
                total = counts[l][members].sum(axis=0).astype(np.float64)
                pi[labeling][l, c] = (prior_count + total) / (m * prior_count + total.sum())
    return MultinomialModel(pi_pred=pi["pred"], pi_true=pi["true"], prior_count=prior_count)


def fit_multinomial(ds, indices, k, prior_count=0.5, metric="cosine"):
    """Fit the multinomial count model on a dataset subset (leave-one-out)."""
    sub = ds.subset(indices)
    counts = neighbor_class_counts(
        [b.matrix for b in sub.layers], sub.true_labels, k, metric=metric, loo=True
    )
    return fit_multinomial_from_counts(
        counts, sub.pred_labels, sub.true_labels, sub.num_classes, prior_count
    )


def multinomial_lrt(counts, pi, k):
    """Likelihood-ratio goodness-of-fit statistic sum_i k_i log(k_i / (k pi_i)).

    Zero counts contribute nothing; a zero pi under a positive count is an
    error (prevented upstream by the MAP prior).
    """
    c = np.asarray(getattr(counts, "counts", counts), dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if c.sum() != k:
        raise ValueError(f"counts sum to {c.sum()}, expected k={k}")
    active = c > 0
    if np.any(pi[active] <= 0):
        raise ValueError("zero probability under a positive count")
    t = float(np.sum(c[active] * np.log(c[active] / (k * pi[active]))))
    return max(t, 0.0)


def _lrt_rows(count_rows, pi_rows, k):
    """Row-wise LRT for (B, m) counts against (B, m) probability rows."""
    c = count_rows.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(c > 0, c * np.log(np.maximum(c, 1e-300) / (k * pi_rows)), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0)


def binomial_stat(counts, cls, k):
    """Fraction of the k nearest neighbors not from class cls."""
    c = np.asarray(getattr(counts, "counts", counts))
    if c.sum() != k:
        raise ValueError(f"counts sum to {c.sum()}, expected k={k}")
    return float(k - c[cls]) / k


def trust_stat(x_layer, cls, class_sets, exclude_self=False):
    """Inverted trust score: d(x, set_cls) / min over other classes of d(x, set_i).

    class_sets is a sequence of KnnIndex objects, one per class, built over
    the appropriate labeling for the conditioning being computed.
    """
    dists = np.array(
        [idx.query(x_layer, 1, exclude_self=exclude_self).distances[0] for idx in class_sets]
    )
    return _trust_from_dists(dists[None, :], np.array([cls]))[0]


def _trust_from_dists(dist_rows, cls_per_row):
    """Trust statistic from per-class nearest distances; 0/0 resolves to 0."""
    b = dist_rows.shape[0]
    num = dist_rows[np.arange(b), cls_per_row]
    masked = dist_rows.copy()
    masked[np.arange(b), cls_per_row] = np.inf
    den = masked.min(axis=1)
    out = np.empty(b)
    zero_num = num == 0.0
    out[zero_num] = 0.0
    with np.errstate(divide="ignore"):
        out[~zero_num] = num[~zero_num] / den[~zero_num]
    return out


def _lid_from_rows(dist_rows):
    """Row-wise LID estimates with the degenerate-neighborhood conventions."""
    b, k = dist_rows.shape
    out = np.empty(b)
    for i in range(b):
        r = dist_rows[i]
        r = r[r > 0.0]
        if r.size < 2:
            out[i] = LID_DEGENERATE_LOW
            continue
        denom = np.mean(np.log(r / r[-1]))
        out[i] = LID_DEGENERATE_HIGH if denom == 0.0 else min(-1.0 / denom, LID_DEGENERATE_HIGH)
    return out


def lid_stat(x_layer, cls, class_index, k, exclude_self=False):
    """LID of x within the class set, with zero-distance duplicates dropped."""
    q = min(k + 8, class_index.num_points - (1 if exclude_self else 0))
    nb = class_index.query(x_layer, q, exclude_self=exclude_self)
    pos = nb.distances[nb.distances > 0.0][:k]
    return float(_lid_from_rows(pos[None, :])[0]) if pos.size >= 2 else LID_DEGENERATE_LOW


@dataclass
class StatVectorBundle:
    """Per-sample statistic vectors: one entry per (kind, layer).

    t_pred conditions every entry on the sample's predicted class; t_true
    holds one such vector per candidate true class. Entries are laid out
    kind-major: kinds[0] layer 0..L, then kinds[1] layer 0..L, and so on.
    """

    t_pred: np.ndarray
    t_true: np.ndarray
    pred_class: int
    kinds: tuple
    num_layers: int

    @property
    def num_tests(self):
        return self.t_pred.shape[0]


class StatModel:
    """Fitted reference structures for computing statistic bundles.

    Holds, per layer, the kNN indexes over the calibration representations
    (full set plus per-class subsets as required by the configured kinds)
    together with the multinomial parameters.
    """

    def __init__(self, kinds, k, metric, m, layer_dims):
        unknown = set(kinds) - set(STAT_KINDS)
        if unknown:
            raise ValueError(f"unknown statistic kinds: {sorted(unknown)}")
        if not kinds:
            raise ValueError("at least one statistic kind is required")
        self.kinds = tuple(kinds)
        self.k = int(k)
        self.metric = metric
        self.m = int(m)
        self.layer_dims = list(layer_dims)
        self.full_indexes = None
        self.true_class_indexes = None
        self.pred_class_indexes = None
        self.cal_layers = None
        self.true_labels = None
        self.pred_labels = None
        self.multinomial = None

    @property
    def num_layers(self):
        return len(self.layer_dims)

    @property
    def num_tests(self):
        return len(self.kinds) * self.num_layers

    @classmethod
    def fit(cls, layer_mats, true_labels, pred_labels, kinds=("multinomial",), k=None,
            metric="cosine", prior_count=0.5):
        """Fit reference structures on calibration-layer matrices."""
        true_labels = np.asarray(true_labels, dtype=np.int64)
        pred_labels = np.asarray(pred_labels, dtype=np.int64)
        n = true_labels.shape[0]
        m = int(max(true_labels.max(), pred_labels.max())) + 1
        if k is None:
            k = default_k(n)
        layer_mats = [np.ascontiguousarray(mat, dtype=np.float64) for mat in layer_mats]
        model = cls(kinds, k, metric, m, [mat.shape[1] for mat in layer_mats])
        model.cal_layers = layer_mats
        model.true_labels = true_labels
        model.pred_labels = pred_labels

        needs_counts = "multinomial" in kinds or "binomial" in kinds
        needs_true_sets = "trust" in kinds or "lid" in kinds or "adist" in kinds
        needs_pred_sets = "trust" in kinds

        if needs_counts:
            model.full_indexes = [build_index(mat, metric=metric) for mat in layer_mats]
        if needs_true_sets:
            model.true_class_indexes = _per_class_indexes(layer_mats, true_labels, m, metric, k, kinds)
        if needs_pred_sets:
            model.pred_class_indexes = _per_class_indexes(layer_mats, pred_labels, m, metric, k, kinds)

        if needs_counts:
            counts = neighbor_class_counts(
                layer_mats, true_labels, k, metric=metric, loo=True, indexes=model.full_indexes
            )
            model.multinomial = fit_multinomial_from_counts(
                counts, pred_labels, true_labels, m, prior_count
            )
        return model

    # -- statistic computation ------------------------------------------------

    def _counts(self, layer_reps, loo):
        out = []
        for l, index in enumerate(self.full_indexes):
            idx, _ = index.query_many(layer_reps[l], self.k, exclude_self=loo)
            votes = self.true_labels[idx]
            counts = np.zeros((layer_reps[l].shape[0], self.m), dtype=np.int64)
            for c in range(self.m):
                counts[:, c] = np.sum(votes == c, axis=1)
            out.append(counts)
        return out

    def _class_set_nearest(self, indexes, layer_reps, loo):
        """Nearest distance to each class set per layer: list of (B, m)."""
        out = []
        for l in range(self.num_layers):
            b = layer_reps[l].shape[0]
            dists = np.empty((b, self.m))
            for c in range(self.m):
                _, d = indexes[l][c].query_many(layer_reps[l], 1, exclude_self=loo)
                dists[:, c] = d[:, 0]
            out.append(dists)
        return out

    def _class_set_lid(self, layer_reps, loo):
        """LID within each true-class set per layer: list of (B, m)."""
        out = []
        for l in range(self.num_layers):
            b = layer_reps[l].shape[0]
            vals = np.empty((b, self.m))
            for c in range(self.m):
                index = self.true_class_indexes[l][c]
                q = min(self.k + 8, index.num_points - (1 if loo else 0))
                _, d = index.query_many(layer_reps[l], q, exclude_self=loo)
                for i in range(b):
                    pos = d[i][d[i] > 0.0][: self.k]
                    vals[i, c] = _lid_from_rows(pos[None, :])[0] if pos.size >= 2 else LID_DEGENERATE_LOW
            out.append(vals)
        return out

    def _class_set_adist(self, layer_reps, loo):
        """Mean kNN distance within each true-class set per layer."""
        out = []
        for l in range(self.num_layers):
            b = layer_reps[l].shape[0]
            vals = np.empty((b, self.m))
            for c in range(self.m):
                index = self.true_class_indexes[l][c]
                q = min(self.k, index.num_points - (1 if loo else 0))
                _, d = index.query_many(layer_reps[l], q, exclude_self=loo)
                vals[:, c] = d.mean(axis=1)
            out.append(vals)
        return out

    def stat_matrices(self, layer_reps, pred_classes, loo=False):
        """Statistic vectors for a batch: (B, n_tests) predicted-class
        conditioned and (B, m, n_tests) true-class conditioned."""
        pred_classes = np.asarray(pred_classes, dtype=np.int64)
        b = pred_classes.shape[0]
        rows = np.arange(b)
        nl = self.num_layers
        t_pred = np.empty((b, self.num_tests))
        t_true = np.empty((b, self.m, self.num_tests))

        counts = self._counts(layer_reps, loo) if ("multinomial" in self.kinds or "binomial" in self.kinds) else None
        trust_pred = trust_true = None
        if "trust" in self.kinds:
            trust_pred = self._class_set_nearest(self.pred_class_indexes, layer_reps, loo)
            trust_true = self._class_set_nearest(self.true_class_indexes, layer_reps, loo)
        lid_vals = self._class_set_lid(layer_reps, loo) if "lid" in self.kinds else None
        adist_vals = self._class_set_adist(layer_reps, loo) if "adist" in self.kinds else None

        for ki, kind in enumerate(self.kinds):
            for l in range(nl):
                col = ki * nl + l
                if kind == "multinomial":
                    mm = self.multinomial
                    t_pred[:, col] = _lrt_rows(counts[l], mm.pi_pred[l][pred_classes], self.k)
                    for c in range(self.m):
                        t_true[:, c, col] = _lrt_rows(
                            counts[l], np.broadcast_to(mm.pi_true[l, c], (b, self.m)), self.k
                        )
                elif kind == "binomial":
                    t_pred[:, col] = (self.k - counts[l][rows, pred_classes]) / self.k
                    for c in range(self.m):
                        t_true[:, c, col] = (self.k - counts[l][:, c]) / self.k
                elif kind == "trust":
                    t_pred[:, col] = _trust_from_dists(trust_pred[l], pred_classes)
                    for c in range(self.m):
                        t_true[:, c, col] = _trust_from_dists(trust_true[l], np.full(b, c))
                elif kind == "lid":
                    t_pred[:, col] = lid_vals[l][rows, pred_classes]
                    for c in range(self.m):
                        t_true[:, c, col] = lid_vals[l][:, c]
                elif kind == "adist":
                    t_pred[:, col] = adist_vals[l][rows, pred_classes]
                    for c in range(self.m):
                        t_true[:, c, col] = adist_vals[l][:, c]
        return t_pred, t_true


def _per_class_indexes(layer_mats, labels, m, metric, k, kinds):
    indexes = []
    for mat in layer_mats:
        per_class = []
        for c in range(m):
            members = np.nonzero(labels == c)[0]
            if members.size == 0:
                raise ValueError(f"empty class set: class {c} has no members")
            if ("lid" in kinds or "adist" in kinds) and members.size < k + 1:
                raise ValueError(
                    f"class {c} has {members.size} members; kNN-distance statistics "
                    f"need at least k+1={k + 1}"
                )
            per_class.append(build_index(mat[members], metric=metric))
        indexes.append(per_class)
    return indexes


def compute_stat_bundle(sample_layers, pred_class, model, loo=False):
    """Statistic bundle for one sample given a fitted StatModel."""
    reps = [np.asarray(x, dtype=np.float64)[None, :] for x in sample_layers]
    t_pred, t_true = model.stat_matrices(reps, np.array([pred_class]), loo=loo)
    return StatVectorBundle(
        t_pred=t_pred[0],
        t_true=t_true[0],
        pred_class=int(pred_class),
        kinds=model.kinds,
        num_layers=model.num_layers,
    )
