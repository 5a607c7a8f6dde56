"""One-command synthetic pipeline: blobs, toy network, detector, attack.

Generates overlapping Gaussian blobs squashed into the middle of the input
box, trains the toy classifier, fits two detectors on a fresh calibration
draw (the Fisher+multinomial variant the attack targets, plus a
distance-statistic variant for the OOD task), scores held-out natural and
uniform-noise inputs, runs the defense-aware attack, and evaluates.

Adversarial samples for evaluation are the smallest-norm network-flipping
iterates whose ground-truth (Gaussian-posterior) class still matches the
source class: perturbations that change the true class are class changes,
not adversarial examples. The attack's own success measure (flipping the
defended prediction) is reported alongside.
"""

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import metrics as mt
from .attack import AttackConfig, run_attack
from .dataset import write_dataset
from .detector import DetectorConfig, fit_detector, save_detector, score_dataset
from .synthetic import bayes_classify, blob_geometry, gaussian_blobs, uniform_noise
from .toynet import ToyNetwork, accuracy, export_representations, save_network, train_toy

logger = logging.getLogger(__name__)


@dataclass
class DemoSettings:
    seed: int = 7
    alpha: float = 0.05
    num_classes: int = 3
    dim: int = 2
    spread: float = 1.2
    box_margin: float = 2.0
    n_train: int = 800
    n_cal: int = 800
    n_test: int = 600
    n_noise: int = 400
    n_attack: int = 200
    hidden: tuple = (16, 16)
    epochs: int = 150
    lr: float = 0.1
    attack_max_iters: int = 300
    stat_kinds: tuple = ("multinomial",)
    combiner: str = "fisher"
    dim_reduce: str | None = None
    ood_stat_kinds: tuple = ("lid", "adist")
    ood_metric: str = "euclidean"
    workers: int = 1
    attack_timeout: float | None = None


def _attack_batch(net, detector, xs, ys, ref_inputs, ref_labels, config, workers):
    """Attack each (x, y); independent per sample, so optionally forked."""
    args = list(zip(xs, ys))
    if workers <= 1 or len(args) < 4:
        return [
            run_attack(net, detector, x, int(y), ref_inputs, ref_labels, config)
            for x, y in args
        ]
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    global _WORK
    _WORK = (net, detector, ref_inputs, ref_labels, config)
    with ctx.Pool(workers) as pool:
        return pool.map(_attack_one, args)


_WORK = None


def _attack_one(arg):
    x, y = arg
    net, detector, ref_inputs, ref_labels, config = _WORK
    return run_attack(net, detector, x, int(y), ref_inputs, ref_labels, config)


def ap_at_proportion(natural_scores, anomalous_scores, proportion, seed=0, repeats=25):
    """Median AP when anomalous samples are mixed in at a fixed proportion.

    When there are too few anomalous samples for the requested proportion,
    the natural set is subsampled instead so the proportion stays exact.
    """
    natural_scores = np.asarray(natural_scores, dtype=float)
    anomalous_scores = np.asarray(anomalous_scores, dtype=float)
    if anomalous_scores.size == 0:
        raise ValueError("no anomalous scores")
    n_nat = natural_scores.size
    take = max(1, int(round(proportion / (1.0 - proportion) * n_nat)))
    rng = np.random.default_rng(seed)
    aps = []
    for _ in range(repeats):
        if take <= anomalous_scores.size:
            nat = natural_scores
            anom = anomalous_scores[rng.choice(anomalous_scores.size, take, replace=False)]
        else:
            anom = anomalous_scores
            keep = max(1, int(round((1.0 - proportion) / proportion * anom.size)))
            nat = natural_scores[rng.choice(n_nat, min(keep, n_nat), replace=False)]
        ls = mt.LabeledScores(
            scores=np.concatenate([nat, anom]),
            is_anomalous=np.concatenate(
                [np.zeros(nat.size, dtype=bool), np.ones(anom.size, dtype=bool)]
            ),
        )
        aps.append(mt.average_precision(ls))
    return float(np.median(aps))


def run_demo(out_dir=None, settings=None):
    """Run the full pipeline; returns (results dict, artifacts dict)."""
    s = settings or DemoSettings()
    blob_kw = dict(
        num_classes=s.num_classes, dim=s.dim, spread=s.spread, box_margin=s.box_margin
    )
    x_train, y_train = gaussian_blobs(s.n_train, seed=[s.seed, 0], **blob_kw)
    x_cal, y_cal = gaussian_blobs(s.n_cal, seed=[s.seed, 1], **blob_kw)
    x_test, y_test = gaussian_blobs(s.n_test, seed=[s.seed, 2], **blob_kw)
    x_noise = uniform_noise(s.n_noise, s.dim, seed=[s.seed, 3])
    centers, sigma = blob_geometry(
        num_classes=s.num_classes, dim=s.dim, spread=s.spread, box_margin=s.box_margin
    )

    net = ToyNetwork(
        [s.dim, *s.hidden, s.num_classes],
        activations=["tanh"] * len(s.hidden),
        seed=s.seed,
    )
    net = train_toy(net, x_train, y_train, epochs=s.epochs, lr=s.lr, seed=s.seed)
    train_acc = accuracy(net, x_train, y_train)
    test_acc = accuracy(net, x_test, y_test)
    logger.info("toy network accuracy: train %.3f test %.3f", train_acc, test_acc)

    cal_ds = export_representations(net, x_cal, y_cal)
    test_ds = export_representations(net, x_test, y_test)
    noise_ds = export_representations(net, x_noise, np.zeros(s.n_noise, dtype=np.int64))

    detector = fit_detector(
        cal_ds,
        DetectorConfig(
            stat_kinds=s.stat_kinds, combiner=s.combiner, alpha=s.alpha,
            seed=s.seed, dim_reduce=s.dim_reduce,
        ),
    )
    ood_detector = fit_detector(
        cal_ds,
        DetectorConfig(
            stat_kinds=s.ood_stat_kinds, combiner=s.combiner, alpha=s.alpha,
            seed=s.seed, dim_reduce=s.dim_reduce, metric=s.ood_metric,
        ),
    )

    natural = score_dataset(detector, test_ds, task="adversarial")
    natural_ood = score_dataset(ood_detector, test_ds, task="ood")
    noise_scored = score_dataset(ood_detector, noise_ds, task="ood")
    nat_adv_scores = np.array([r.adv_score for r in natural])
    nat_ood_scores = np.array([r.ood_score for r in natural_ood])
    noise_ood_scores = np.array([r.ood_score for r in noise_scored])

    net_pred = np.array([r.pred_class for r in natural])
    defense_pred = np.where(
        [r.detected for r in natural], [r.corrected_class for r in natural], net_pred
    )
    eligible = np.nonzero((net_pred == y_test) & (defense_pred == y_test))[0][: s.n_attack]
    attack_cfg = AttackConfig(
        max_iters=s.attack_max_iters, seed=s.seed, timeout_seconds=s.attack_timeout
    )
    results = _attack_batch(
        net, detector, x_test[eligible], y_test[eligible],
        x_cal, y_cal, attack_cfg, s.workers,
    )
    sources = y_test[eligible]
    success_mask = np.array([r.success for r in results])
    success_norms = np.array([r.l2_norm for r in results])[success_mask]

    # Adversarial evaluation set: minimal network-flipping iterates that kept
    # their ground-truth class.
    has_flip = np.array([r.x_flip is not None for r in results])
    x_flip = np.array(
        [r.x_flip if r.x_flip is not None else x_test[i] for r, i in zip(results, eligible)]
    )
    flip_norms = np.array([r.flip_norm if r.flip_norm is not None else 0.0 for r in results])
    bayes_src = bayes_classify(x_flip, centers, sigma) == sources
    adv_ds = export_representations(net, x_flip, sources)
    adv_scored = score_dataset(detector, adv_ds, task="adversarial")
    adv_scores = np.array([r.adv_score for r in adv_scored])
    still_flipped = adv_ds.pred_labels != sources
    valid = has_flip & bayes_src & still_flipped

    correct_nat = nat_adv_scores[net_pred == y_test]
    miscls_nat = nat_adv_scores[net_pred != y_test]
    detected = np.array([r.detected for r in adv_scored])
    corrected = np.array([r.corrected_class for r in adv_scored])
    dmask = valid & detected
    corrected_acc = float(np.mean(corrected[dmask] == sources[dmask])) if dmask.any() else float("nan")

    results_dict = {
        "seed": s.seed,
        "alpha": s.alpha,
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "tau_adv": detector.tau_adv,
        "tau_ood": ood_detector.tau_ood,
        "natural_detection_rate": float(np.mean([r.detected for r in natural])),
        "attack_attempts": int(eligible.size),
        "attack_successes": int(success_mask.sum()),
        "attack_success_rate": float(success_mask.mean()) if eligible.size else float("nan"),
        "attack_mean_l2_success": float(success_norms.mean()) if success_norms.size else float("nan"),
        "num_adversarial_samples": int(valid.sum()),
        "mean_flip_norm": float(flip_norms[valid].mean()) if valid.any() else float("nan"),
        "mean_score_attack": float(adv_scores[valid].mean()) if valid.any() else float("nan"),
        "mean_score_misclassified": float(miscls_nat.mean()) if miscls_nat.size else float("nan"),
        "mean_score_correct": float(correct_nat.mean()),
        "ap_adversarial_at_10pct": ap_at_proportion(
            nat_adv_scores, adv_scores[valid], 0.10, seed=s.seed
        ) if valid.any() else float("nan"),
        "ap_ood_at_10pct": ap_at_proportion(
            nat_ood_scores, noise_ood_scores, 0.10, seed=s.seed
        ),
        "num_detected_adversarial": int(dmask.sum()),
        "corrected_accuracy_on_detected": corrected_acc,
    }

    artifacts = {
        "detector": detector,
        "ood_detector": ood_detector,
        "net": net,
        "natural": natural,
        "adversarial": adv_scored,
        "adversarial_valid_mask": valid,
        "attack_results": results,
        "noise": noise_scored,
        "sources": sources,
    }

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_network(net, os.path.join(out_dir, "toynet"))
        write_dataset(cal_ds, os.path.join(out_dir, "data", "calibration"))
        write_dataset(test_ds, os.path.join(out_dir, "data", "test_natural"))
        write_dataset(noise_ds, os.path.join(out_dir, "data", "ood_noise"))
        write_dataset(adv_ds, os.path.join(out_dir, "data", "adversarial"))
        save_detector(detector, os.path.join(out_dir, "model"))
        save_detector(ood_detector, os.path.join(out_dir, "model_ood"))
        from .cli import write_attack_csv, write_scores_csv

        write_scores_csv(os.path.join(out_dir, "scores_natural.csv"), natural, "adversarial")
        write_scores_csv(os.path.join(out_dir, "scores_ood_natural.csv"), natural_ood, "ood")
        write_scores_csv(os.path.join(out_dir, "scores_ood_noise.csv"), noise_scored, "ood")
        write_scores_csv(os.path.join(out_dir, "scores_adversarial.csv"), adv_scored, "adversarial")
        write_attack_csv(os.path.join(out_dir, "attack_results.csv"), results)
        _demo_plots(out_dir, results_dict, nat_adv_scores, adv_scores[valid],
                    nat_ood_scores, noise_ood_scores, miscls_nat, correct_nat)
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(results_dict, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return results_dict, artifacts


def _demo_plots(out_dir, results, nat_adv, adv_valid, nat_ood, noise_ood, mis, cor):
    from . import plotting

    plots = os.path.join(out_dir, "plots")
    os.makedirs(plots, exist_ok=True)
    groups = {"correct natural": cor, "adversarial": adv_valid}
    if mis.size:
        groups["misclassified natural"] = mis
    plotting.plot_score_groups(
        groups, os.path.join(plots, "adversarial_scores.png"),
        "adversarial score by group",
    )
    plotting.plot_score_groups(
        {"natural": nat_ood, "uniform noise": noise_ood},
        os.path.join(plots, "ood_scores.png"), "OOD score by group",
    )
    if adv_valid.size:
        ls = mt.LabeledScores(
            scores=np.concatenate([nat_adv, adv_valid]),
            is_anomalous=np.concatenate(
                [np.zeros(nat_adv.size, dtype=bool), np.ones(adv_valid.size, dtype=bool)]
            ),
        )
        plotting.plot_pr_curve(ls, os.path.join(plots, "adversarial_pr.png"),
                               "adversarial detection precision-recall")
