"""Per-layer intrinsic dimension estimation and linear projection fitting.

The projected dimension for a layer is searched over 20 linearly spaced
candidates between the intrinsic-dimension estimate and ten times it, scored
by stratified cross-validated error of a plain kNN classifier in the
projected space. PCA is the default projection; a neighborhood-preserving
projection (NPP) is available behind the same interface.

Layers at or below NO_REDUCE_MAX_DIM dimensions are left untouched by the
pipeline (identity projection).
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dataset import split_folds
from .knn import build_index, default_k

NO_REDUCE_MAX_DIM = 10
NUM_CANDIDATES = 20


def lid_mle(distances, on_degenerate="inf"):
    """Maximum-likelihood local intrinsic dimension from kNN distances.

    distances: ascending positive kNN distances of one point. All-equal
    distances make the estimator blow up; on_degenerate selects between an
    inf sentinel and raising.
    """
    r = np.asarray(distances, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"need at least 2 distances, got shape {r.shape}")
    if np.any(r <= 0):
        raise ValueError("zero or negative neighbor distance (log singularity)")
    if np.any(np.diff(r) < 0):
        raise ValueError("distances must be ascending")
    denom = np.mean(np.log(r / r[-1]))
    if denom == 0.0:
        if on_degenerate == "inf":
            return math.inf
        raise ValueError("all neighbor distances equal: LID undefined")
    return -1.0 / denom


def _positive_knn_distances(index, x, k, extra=8):
    """kNN distances of x with zero-distance duplicates dropped and re-queried.

    Returns up to k positive distances (fewer when the set is too degenerate).
    """
    want = k
    cap = index.num_points - 1
    while True:
        q = min(cap, want + extra)
        nb = index.query(x, q, exclude_self=True)
        pos = nb.distances[nb.distances > 0.0]
        if pos.size >= k or q == cap:
            return pos[:k]
        want = q + (k - pos.size)


def intrinsic_dimension(points, k=None, metric="euclidean"):
    """ceil of the median LID estimate over all points, at least 1.

    Points whose neighborhoods contain fewer than two distinct positive
    distances after duplicate-dropping are excluded from the median.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k is None:
        k = default_k(n)
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    index = build_index(pts, metric=metric, mode="exact")
    estimates = []
    for i in range(n):
        r = _positive_knn_distances(index, pts[i], k)
        if r.size < 2:
            continue
        est = lid_mle(r, on_degenerate="inf")
        if math.isfinite(est):
            estimates.append(est)
    if not estimates:
        raise ValueError("no point had enough distinct neighbor distances for LID")
    return max(1, math.ceil(float(np.median(estimates))))


@dataclass(frozen=True)
class ProjectionModel:
    """Linear projection x -> (x - mean) @ basis with orthonormal columns."""

    mean: np.ndarray
    basis: np.ndarray
    method: str

    def __post_init__(self):
        d, dp = self.basis.shape
        if dp > d:
            raise ValueError(f"projected dim {dp} exceeds input dim {d}")
        gram = self.basis.T @ self.basis
        if not np.allclose(gram, np.eye(dp), atol=1e-8):
            raise ValueError("basis columns are not orthonormal")

    @property
    def in_dim(self):
        return self.basis.shape[0]

    @property
    def out_dim(self):
        return self.basis.shape[1]


def identity_projection(dim):
    return ProjectionModel(mean=np.zeros(dim), basis=np.eye(dim), method="identity")


def apply_projection(model, points):
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.shape[1] != model.in_dim:
        raise ValueError(f"points have dim {pts.shape[1]}, model expects {model.in_dim}")
    out = (pts - model.mean) @ model.basis
    return out[0] if single else out


@dataclass
class DimSearchReport:
    intrinsic_dim: int
    candidate_dims: list
    cv_errors: list
    chosen_dim: int
    clipped: bool = False
    metric: str = "cosine"
    notes: list = field(default_factory=list)


def _fit_pca(points, dim):
    mean = points.mean(axis=0)
    centered = points - mean
    # Right singular vectors; sign-stabilized for run-to-run determinism.
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:dim].T
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(dim)])
    flip[flip == 0] = 1.0
    return ProjectionModel(mean=mean, basis=basis * flip, method="pca")


def _fit_npp(points, dim, k=None, reg=1e-3):
    """Neighborhood-preserving projection via the LLE-style weight matrix.

    Solves the generalized eigenproblem for directions that best preserve
    each point's reconstruction from its k nearest neighbors, then returns
    an orthonormal basis for the resulting subspace.
    """
    n, d = points.shape
    if k is None:
        k = min(default_k(n), n - 1)
    mean = points.mean(axis=0)
    xc = points - mean
    index = build_index(points, metric="euclidean", mode="exact")
    idx, _ = index.query_many(points, k, exclude_self=True)
    w_rows = np.zeros((n, n))
    for i in range(n):
        z = points[idx[i]] - points[i]
        gram = z @ z.T
        gram += np.eye(k) * (reg * (np.trace(gram) if np.trace(gram) > 0 else 1.0))
        w = np.linalg.solve(gram, np.ones(k))
        w_rows[i, idx[i]] = w / w.sum()
    iw = np.eye(n) - w_rows
    m = iw.T @ iw
    a = xc.T @ m @ xc
    b = xc.T @ xc + np.eye(d) * reg
    vals, vecs = scipy.linalg.eigh(a, b)
    sub = vecs[:, np.argsort(vals)[:dim]]
    q, _ = np.linalg.qr(sub)
    return ProjectionModel(mean=mean, basis=q[:, :dim], method="npp")


def fit_projection_at(points, dim, method="pca", seed=0):
    """Fit a projection of a fixed output dimension."""
    pts = np.asarray(points, dtype=np.float64)
    dim = int(min(dim, pts.shape[1]))
    if method == "pca":
        return _fit_pca(pts, dim)
    if method == "npp":
        return _fit_npp(pts, dim)
    raise ValueError(f"unknown projection method: {method!r}")


def _knn_classify_error(train_x, train_y, test_x, test_y, m, metric):
    k = min(default_k(train_x.shape[0]), train_x.shape[0])
    index = build_index(train_x, metric=metric, mode="exact")
    idx, _ = index.query_many(test_x, k)
    votes = train_y[idx]
    counts = np.stack([np.sum(votes == c, axis=1) for c in range(m)], axis=1)
    pred = np.argmax(counts, axis=1)  # argmax takes the smallest class on ties
    return float(np.mean(pred != test_y))


def fit_projection(points, labels, method="pca", num_folds=5, seed=0, metric="cosine", k=None):
    """Search the projected dimension and fit the final projection.

    Candidates are NUM_CANDIDATES linearly spaced dims in
    [d_int, 10 * d_int]; each is scored by the average stratified test-fold
    error of a kNN classifier, and the smallest dim achieving the minimum
    error wins. Candidates above the input dimension are clipped to it and
    the report is flagged.
    """
    pts = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = pts.shape
    if d < 2:
        raise ValueError("need at least 2 input dimensions to search projections")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("need at least 2 classes for the dimension search")
    m = int(classes.max()) + 1

    d_int = intrinsic_dimension(pts, k=k)
    candidates = list(np.rint(np.linspace(d_int, 10 * d_int, NUM_CANDIDATES)).astype(int))
    eval_dims = sorted({min(c, d) for c in candidates})
    clipped = all(c >= d for c in candidates)

    folds = split_folds(labels, num_folds, seed)
    errors_by_dim = {}
    for dim in eval_dims:
        errs = []
        for f in range(num_folds):
            tr = folds.rest_indices(f)
            te = folds.fold_indices(f)
            model = fit_projection_at(pts[tr], dim, method=method, seed=seed)
            errs.append(
                _knn_classify_error(
                    apply_projection(model, pts[tr]),
                    labels[tr],
                    apply_projection(model, pts[te]),
                    labels[te],
                    m,
                    metric,
                )
            )
        errors_by_dim[dim] = float(np.mean(errs))

    cv_errors = [errors_by_dim[min(c, d)] for c in candidates]
    best = min(eval_dims, key=lambda dim: (errors_by_dim[dim], dim))
    report = DimSearchReport(
        intrinsic_dim=d_int,
        candidate_dims=[int(c) for c in candidates],
        cv_errors=cv_errors,
        chosen_dim=int(best),
        clipped=bool(clipped),
        metric=metric,
    )
    if clipped:
        report.notes.append(f"all candidates >= input dim {d}; search clipped to {d}")
    model = fit_projection_at(pts, best, method=method, seed=seed)
    return model, report
