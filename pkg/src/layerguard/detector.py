"""Anomaly scoring, threshold calibration, and corrected prediction.

A fitted detector owns, per layer, a projection and the statistic reference
structures, plus the calibration nulls and a threshold calibrated to a
target false-positive rate. Scores live in natural-log space throughout:
the adversarial score is the log-ratio of the best alternative-class
combined p-value to the predicted-class one, and the OOD score is the
negative log of the predicted-class p-value.
"""

import json
import logging
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import pvalues as pv
from .dataset import LayerDataset
from .dimreduce import (
    NO_REDUCE_MAX_DIM,
    ProjectionModel,
    apply_projection,
    fit_projection,
    identity_projection,
)
from .knn import default_k
from .teststats import StatModel, StatVectorBundle

logger = logging.getLogger(__name__)

_MODEL_VERSION = 1
DEFAULT_THRESHOLD_MARGIN = 1e-6


@dataclass
class DetectorConfig:
    """Everything that determines a fit, and therefore the fitted bytes."""

    stat_kinds: tuple = ("multinomial",)
    combiner: str = "fisher"
    alpha: float = 0.05
    k: int | None = None
    seed: int = 0
    use_pairs: bool | None = None
    metric: str = "cosine"
    dim_reduce: str | None = "pca"
    prior_count: float = 0.5
    num_bootstraps: int = pv.DEFAULT_BOOTSTRAPS
    min_null_count: int = pv.MIN_NULL_COUNT
    aklpe_k: int | None = None
    threshold_margin: float = DEFAULT_THRESHOLD_MARGIN

    def __post_init__(self):
        self.stat_kinds = tuple(self.stat_kinds)
        if self.combiner not in ("fisher", "hmp", "aklpe"):
            raise ValueError(f"unknown combiner: {self.combiner!r}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass
class ScoredSample:
    sample_id: int
    pred_class: int
    adv_score: float
    ood_score: float
    detected: bool
    corrected_class: int


def adversarial_score(bundle, pred_class=None):
    """Log-ratio score: best alternative-class p-value over predicted-class.

    Works directly on log p-values, so Fisher log-sums are never
    exponentiated.
    """
    pred = bundle_pred_class(bundle, pred_class)
    m = bundle.log_q_true.shape[0]
    if m < 2:
        raise ValueError("adversarial score needs at least 2 classes")
    others = np.delete(bundle.log_q_true, pred)
    return float(others.max() - bundle.log_q_pred)


def ood_score(bundle):
    """Negative log of the predicted-class combined p-value."""
    return float(-bundle.log_q_pred)


def bundle_pred_class(bundle, pred_class):
    if pred_class is None:
        raise ValueError("pred_class is required")
    return int(pred_class)


def calibrate_threshold(scores, alpha, margin=DEFAULT_THRESHOLD_MARGIN):
    """Smallest observed score whose empirical exceedance rate is <= alpha.

    When no observed score achieves the target (degenerate ties, or alpha
    below 1/N), returns max(scores) + margin; that case is logged and
    flagged by the caller via threshold_is_degenerate.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))
    n = s.size
    if n == 0:
        raise ValueError("empty score array")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    uniq = np.unique(s)
    counts = n - np.searchsorted(s, uniq, side="left")
    ok = np.nonzero(counts / n <= alpha)[0]
    if ok.size == 0:
        logger.warning(
            "no observed score achieves FPR <= %.4g over %d samples; "
            "using max score + margin", alpha, n,
        )
        return float(uniq[-1] + margin)
    return float(uniq[ok[0]])


def threshold_is_degenerate(scores, tau):
    return bool(tau > np.max(scores))


def corrected_predict(bundle, pred_class, adv_score_value, tau):
    """Combined classification rule: keep the prediction below threshold,
    otherwise the candidate class with the largest combined p-value."""
    if adv_score_value < tau:
        return int(pred_class)
    return int(np.argmax(bundle.log_q_true))  # argmax breaks ties low


class DetectorModel:
    """Fitted detection pipeline; immutable after fit."""

    def __init__(self, config, layer_names, raw_dims, projections, stat_model,
                 null_bank, tau_adv, tau_ood, degenerate_adv, degenerate_ood,
                 dim_reports=None):
        self.config = config
        self.layer_names = list(layer_names)
        self.raw_dims = list(raw_dims)
        self.projections = list(projections)
        self.stat_model = stat_model
        self.null_bank = null_bank
        self.tau_adv = float(tau_adv)
        self.tau_ood = float(tau_ood)
        self.degenerate_adv = bool(degenerate_adv)
        self.degenerate_ood = bool(degenerate_ood)
        self.dim_reports = dim_reports or {}

    @property
    def num_classes(self):
        return self.stat_model.m

    @property
    def k(self):
        return self.stat_model.k

    # -- scoring ---------------------------------------------------------------

    def check_compatible(self, ds):
        if ds.layer_names() != self.layer_names or ds.layer_dims() != self.raw_dims:
            raise ValueError(
                f"dataset layers {list(zip(ds.layer_names(), ds.layer_dims()))} do not match "
                f"model layers {list(zip(self.layer_names, self.raw_dims))}"
            )
        if ds.num_classes != self.num_classes:
            raise ValueError(
                f"dataset has {ds.num_classes} classes, model has {self.num_classes}"
            )

    def project(self, layer_mats):
        return [apply_projection(p, m) for p, m in zip(self.projections, layer_mats)]

    def bundles_for(self, layer_mats, pred_labels, loo=False, rng_phase=1):
        """Per-sample p-value bundles for already-projected layer matrices."""
        t_pred, t_true = self.stat_model.stat_matrices(layer_mats, pred_labels, loo=loo)
        cfg = self.config
        out = []
        for i in range(t_pred.shape[0]):
            svb = StatVectorBundle(
                t_pred=t_pred[i], t_true=t_true[i], pred_class=int(pred_labels[i]),
                kinds=self.stat_model.kinds, num_layers=self.stat_model.num_layers,
            )
            rng = np.random.default_rng([cfg.seed, rng_phase, i])
            out.append(
                pv.combine_bundle(
                    svb, self.null_bank, method=cfg.combiner, use_pairs=cfg.use_pairs,
                    num_bootstraps=cfg.num_bootstraps, rng=rng,
                    exclude_id=i if loo else None,
                )
            )
        return out

    def score_arrays(self, layer_mats, pred_labels, loo=False, rng_phase=1):
        """(adv_scores, ood_scores, corrected, bundles) for raw layer matrices."""
        proj = self.project(layer_mats)
        bundles = self.bundles_for(proj, pred_labels, loo=loo, rng_phase=rng_phase)
        adv = np.array([adversarial_score(b, p) for b, p in zip(bundles, pred_labels)])
        ood = np.array([ood_score(b) for b in bundles])
        corrected = np.array(
            [
                corrected_predict(b, p, a, self.tau_adv)
                for b, p, a in zip(bundles, pred_labels, adv)
            ],
            dtype=np.int64,
        )
        return adv, ood, corrected, bundles


def fit_detector(ds, config, calibration_indices=None):
    """Fit the full pipeline on a calibration subset of the dataset.

    Deterministic given config.seed; the threshold is calibrated on
    leave-one-out scores of the calibration samples themselves.
    """
    if calibration_indices is None:
        calibration_indices = np.arange(ds.num_samples)
    cal = ds.subset(calibration_indices)
    cfg = config
    k = cfg.k or default_k(cal.num_samples)

    projections = []
    dim_reports = {}
    for blk in cal.layers:
        if cfg.dim_reduce and blk.dim > NO_REDUCE_MAX_DIM:
            model, report = fit_projection(
                blk.matrix, cal.true_labels, method=cfg.dim_reduce,
                seed=cfg.seed, metric=cfg.metric,
            )
            projections.append(model)
            dim_reports[blk.name] = report
            logger.info(
                "layer %s: projected %d -> %d dims (intrinsic %d)",
                blk.name, blk.dim, model.out_dim, report.intrinsic_dim,
            )
        else:
            projections.append(identity_projection(blk.dim))

    proj_mats = [
        apply_projection(p, blk.matrix) for p, blk in zip(projections, cal.layers)
    ]
    stat_model = StatModel.fit(
        proj_mats, cal.true_labels, cal.pred_labels, kinds=cfg.stat_kinds,
        k=k, metric=cfg.metric, prior_count=cfg.prior_count,
    )
    t_pred, t_true = stat_model.stat_matrices(proj_mats, cal.pred_labels, loo=True)
    null_bank = pv.build_null_bank(
        t_pred, t_true, cal.pred_labels, cal.true_labels, cfg.stat_kinds,
        stat_model.num_layers, stat_model.m, min_count=cfg.min_null_count,
        aklpe=(cfg.combiner == "aklpe"), aklpe_k=cfg.aklpe_k,
    )

    model = DetectorModel(
        config=cfg, layer_names=cal.layer_names(), raw_dims=cal.layer_dims(),
        projections=projections, stat_model=stat_model, null_bank=null_bank,
        tau_adv=0.0, tau_ood=0.0, degenerate_adv=False, degenerate_ood=False,
        dim_reports=dim_reports,
    )
    bundles = model.bundles_for(proj_mats, cal.pred_labels, loo=True, rng_phase=0)
    adv = np.array([adversarial_score(b, p) for b, p in zip(bundles, cal.pred_labels)])
    ood = np.array([ood_score(b) for b in bundles])
    model.tau_adv = calibrate_threshold(adv, cfg.alpha, cfg.threshold_margin)
    model.tau_ood = calibrate_threshold(ood, cfg.alpha, cfg.threshold_margin)
    model.degenerate_adv = threshold_is_degenerate(adv, model.tau_adv)
    model.degenerate_ood = threshold_is_degenerate(ood, model.tau_ood)
    logger.info(
        "calibrated thresholds at alpha=%.4g: adversarial %.4f, ood %.4f",
        cfg.alpha, model.tau_adv, model.tau_ood,
    )
    return model


def score_dataset(model, ds, task="adversarial"):
    """Score every sample of a dataset with a fitted detector."""
    model.check_compatible(ds)
    if ds.num_samples == 0:
        return []
    adv, ood, corrected, _ = model.score_arrays(
        [b.matrix for b in ds.layers], ds.pred_labels, loo=False,
    )
    tau = model.tau_adv if task == "adversarial" else model.tau_ood
    task_scores = adv if task == "adversarial" else ood
    out = []
    for i in range(ds.num_samples):
        out.append(
            ScoredSample(
                sample_id=i,
                pred_class=int(ds.pred_labels[i]),
                adv_score=float(adv[i]),
                ood_score=float(ood[i]),
                detected=bool(task_scores[i] >= tau),
                corrected_class=int(corrected[i]),
            )
        )
    return out


# -- serialization ---------------------------------------------------------------


def _cell_tag(cond, cls):
    return f"{cond}_{cls}"


def save_detector(model, path):
    """Versioned model directory: JSON manifest plus .npy blobs.

    Stores the projected calibration representations and labels; the
    statistic model is refit from them deterministically on load.
    """
    os.makedirs(path, exist_ok=True)
    arrays = {}
    for l, proj in enumerate(model.projections):
        arrays[f"proj_mean_{l:02d}"] = proj.mean
        arrays[f"proj_basis_{l:02d}"] = proj.basis
    sm = model.stat_model
    for l, mat in enumerate(sm.cal_layers):
        arrays[f"cal_layer_{l:02d}"] = mat
    arrays["cal_true_labels"] = sm.true_labels
    arrays["cal_pred_labels"] = sm.pred_labels
    for (cond, cls), cell in sorted(model.null_bank.cells.items()):
        tag = _cell_tag(cond, cls)
        arrays[f"null_stats_{tag}"] = cell.stats
        arrays[f"null_ids_{tag}"] = cell.sample_ids
        if cell.aklpe_null_scores is not None:
            arrays[f"aklpe_scores_{tag}"] = cell.aklpe_null_scores
    for name, arr in arrays.items():
        np.save(os.path.join(path, name + ".npy"), np.ascontiguousarray(arr))

    cfg = asdict(model.config)
    cfg["stat_kinds"] = list(model.config.stat_kinds)
    manifest = {
        "version": _MODEL_VERSION,
        "config": cfg,
        "layer_names": model.layer_names,
        "raw_dims": model.raw_dims,
        "proj_methods": [p.method for p in model.projections],
        "k": model.k,
        "num_classes": model.num_classes,
        "num_layers": sm.num_layers,
        "tau_adv": model.tau_adv,
        "tau_ood": model.tau_ood,
        "degenerate_adv": model.degenerate_adv,
        "degenerate_ood": model.degenerate_ood,
        "aklpe_k": {
            _cell_tag(cond, cls): cell.aklpe_k
            for (cond, cls), cell in sorted(model.null_bank.cells.items())
        },
        "array_files": sorted(arrays),
    }
    with open(os.path.join(path, "detector.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_detector(path):
    with open(os.path.join(path, "detector.json"), "r", encoding="utf-8") as fh:
        man = json.load(fh)
    if man.get("version") != _MODEL_VERSION:
        raise ValueError(f"unsupported detector version: {man.get('version')!r}")
    cfg_dict = dict(man["config"])
    cfg_dict["stat_kinds"] = tuple(cfg_dict["stat_kinds"])
    cfg = DetectorConfig(**cfg_dict)

    def arr(name):
        return np.load(os.path.join(path, name + ".npy"))

    num_layers = man["num_layers"]
    projections = [
        ProjectionModel(
            mean=arr(f"proj_mean_{l:02d}"), basis=arr(f"proj_basis_{l:02d}"),
            method=man["proj_methods"][l],
        )
        for l in range(num_layers)
    ]
    cal_mats = [arr(f"cal_layer_{l:02d}") for l in range(num_layers)]
    sm = StatModel.fit(
        cal_mats, arr("cal_true_labels"), arr("cal_pred_labels"),
        kinds=cfg.stat_kinds, k=man["k"], metric=cfg.metric,
        prior_count=cfg.prior_count,
    )

    cells = {}
    for key, k_cell in man["aklpe_k"].items():
        cond, cls = key.rsplit("_", 1)
        cell = pv.NullCell(
            stats=arr(f"null_stats_{key}"), sample_ids=arr(f"null_ids_{key}"),
        )
        if k_cell:
            cell.aklpe_k = k_cell
            cell.aklpe_null_scores = arr(f"aklpe_scores_{key}")
            cell.aklpe_score_ids = cell.sample_ids
        cells[(cond, int(cls))] = cell
    null_bank = pv.EmpiricalNull(
        cells=cells, kinds=cfg.stat_kinds, num_layers=num_layers,
        num_classes=man["num_classes"], min_count=cfg.min_null_count,
    )
    null_bank.validate()

    return DetectorModel(
        config=cfg, layer_names=man["layer_names"], raw_dims=man["raw_dims"],
        projections=projections, stat_model=sm, null_bank=null_bank,
        tau_adv=man["tau_adv"], tau_ood=man["tau_ood"],
        degenerate_adv=man["degenerate_adv"], degenerate_ood=man["degenerate_ood"],
    )
