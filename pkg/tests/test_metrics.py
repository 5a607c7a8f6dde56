import math

import numpy as np
import pytest

from layerguard.metrics import (
    LabeledScores,
    average_precision,
    norm_sweep,
    pauc,
    proportion_sweep,
    sweep_proportions,
)


def ap_oracle(scores, labels):
    """Exhaustive threshold enumeration: step-wise PR integral."""
    thresholds = sorted(set(scores), reverse=True)
    pos = int(np.sum(labels))
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        sel = scores >= t
        tp = int(np.sum(labels & sel))
        fp = int(np.sum(~labels & sel))
        recall = tp / pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def pauc_oracle(scores, labels, alpha):
    """Exhaustive threshold enumeration: trapezoidal partial ROC."""
    thresholds = sorted(set(scores), reverse=True)
    pos = int(np.sum(labels))
    neg = int(np.sum(~labels))
    points = [(0.0, 0.0)]
    for t in thresholds:
        sel = scores >= t
        points.append((np.sum(~labels & sel) / neg, np.sum(labels & sel) / pos))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= alpha:
            break
        if x1 <= alpha:
            area += (x1 - x0) * (y0 + y1) / 2
        else:
            y_cut = y0 + (alpha - x0) / (x1 - x0) * (y1 - y0)
            area += (alpha - x0) * (y0 + y_cut) / 2
            break
    return area / alpha


def _ls(scores, labels):
    return LabeledScores(np.asarray(scores, float), np.asarray(labels, bool))


class TestAveragePrecision:
    def test_perfect(self):
        ls = _ls([3, 4, 1, 2], [1, 1, 0, 0])
        assert average_precision(ls) == 1.0

    def test_all_tied_equals_prevalence(self):
        ls = _ls([5, 5, 5, 5, 5], [1, 0, 0, 1, 0])
        assert average_precision(ls) == pytest.approx(2 / 5)

    def test_hand_example(self):
        ls = _ls([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        assert average_precision(ls) == pytest.approx(0.5 + 0.5 * (2 / 3))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            average_precision(_ls([1, 2], [1, 1]))

    def test_oracle_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            n = int(rng.integers(4, 200))
            labels = np.zeros(n, bool)
            labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = True
            scores = rng.choice([0.1, 0.25, 0.5, 0.8, 1.0], size=n) if rng.random() < 0.5 \
                else rng.normal(size=n)
            if labels.all() or not labels.any():
                continue
            ls = _ls(scores, labels)
            assert average_precision(ls) == pytest.approx(ap_oracle(scores, labels), abs=1e-9)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=100)
        labels = rng.random(100) < 0.3
        if not labels.any() or labels.all():
            labels[:3] = [True, False, True]
        a = average_precision(_ls(scores, labels))
        b = average_precision(_ls(np.exp(scores) * 3 + 1, labels))
        assert a == pytest.approx(b, abs=1e-12)


class TestPauc:
    def test_perfect_any_alpha(self):
        ls = _ls([3, 4, 1, 2], [1, 1, 0, 0])
        for alpha in (0.01, 0.2, 1.0):
            assert pauc(ls, alpha) == pytest.approx(1.0)

    def test_alpha_one_equals_auc(self):
        rng = np.random.default_rng(2)
        scores = rng.normal(size=150)
        labels = rng.random(150) < 0.4
        ls = _ls(scores, labels)
        # Mann-Whitney AUC oracle with half-weight ties
        pos = scores[labels]
        neg = scores[~labels]
        wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
        auc = wins / (len(pos) * len(neg))
        assert pauc(ls, 1.0) == pytest.approx(auc, abs=1e-9)

    def test_random_scores_baseline(self):
        # Exchangeable scores give the diagonal ROC: restricted area alpha^2/2,
        # so alpha/2 after normalization (0.5 exactly when alpha = 1).
        rng = np.random.default_rng(3)
        for alpha, expect in ((0.3, 0.15), (1.0, 0.5)):
            vals = []
            for _ in range(40):
                scores = rng.normal(size=400)
                labels = np.zeros(400, bool)
                labels[rng.choice(400, 100, replace=False)] = True
                vals.append(pauc(_ls(scores, labels), alpha))
            assert np.mean(vals) == pytest.approx(expect, abs=0.05)

    def test_oracle_random_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            n = int(rng.integers(4, 200))
            labels = np.zeros(n, bool)
            labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = True
            if labels.all() or not labels.any():
                continue
            scores = rng.choice(np.linspace(0, 1, 7), size=n)
            alpha = float(rng.choice([0.05, 0.2, 0.5, 1.0]))
            ls = _ls(scores, labels)
            assert pauc(ls, alpha) == pytest.approx(
                pauc_oracle(scores, labels, alpha), abs=1e-9
            )

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=200)
        labels = rng.random(200) < 0.35
        ls = _ls(scores, labels)
        alphas = np.linspace(0.02, 1.0, 25)
        vals = [pauc(ls, a) * a for a in alphas]  # un-normalized area grows
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            pauc(_ls([1, 2], [1, 0]), 0.0)


class TestSweeps:
    def _scored(self, n_anom=400, n_nat=800, seed=6, norm_correlated=True):
        rng = np.random.default_rng(seed)
        nat = rng.normal(size=n_nat)
        norms = np.sort(rng.random(n_anom) * 3)
        anom = norms * 2.0 + rng.normal(size=n_anom) * (0.3 if norm_correlated else 3.0)
        scores = np.concatenate([nat, anom])
        labels = np.concatenate([np.zeros(n_nat, bool), np.ones(n_anom, bool)])
        return LabeledScores(scores, labels, norms=norms)

    def test_proportion_grid_full_range(self):
        props = sweep_proportions(0.5)
        assert props.size == 12
        assert props[0] == pytest.approx(0.005)
        assert props[-1] == pytest.approx(0.3)

    def test_proportion_grid_caps_at_available(self):
        props = sweep_proportions(0.12)
        assert props[-1] == pytest.approx(0.12)

    def test_norm_sweep_monotone_when_score_grows_with_norm(self):
        ls = self._scored()
        rows = norm_sweep(ls)
        assert len(rows) == 12
        aps = [r["average_precision"] for r in rows]
        assert aps[-1] >= aps[0]
        max_norms = [r["max_norm"] for r in rows]
        assert max_norms == sorted(max_norms)

    def test_norm_sweep_full_set_matches_direct(self):
        # When the last proportion covers every anomalous sample the sweep
        # value equals the plain metric on the full mix.
        rng = np.random.default_rng(7)
        n_anom, n_nat = 30, 170
        scores = np.concatenate([rng.normal(size=n_nat), rng.normal(size=n_anom) + 2])
        labels = np.concatenate([np.zeros(n_nat, bool), np.ones(n_anom, bool)])
        ls = LabeledScores(scores, labels, norms=np.sort(rng.random(n_anom)))
        rows = norm_sweep(ls)
        assert rows[-1]["average_precision"] == pytest.approx(
            average_precision(LabeledScores(scores, labels))
        )

    def test_norm_sweep_requires_norms(self):
        ls = _ls([1, 2, 3], [0, 1, 0])
        with pytest.raises(ValueError, match="norms"):
            norm_sweep(ls)

    def test_proportion_sweep_single_repeat(self):
        ls = self._scored(seed=8)
        rows = proportion_sweep(ls, proportions=[0.1], repeats=1, seed=0)
        assert len(rows) == 1
        assert 0 <= rows[0]["average_precision"] <= 1

    def test_proportion_sweep_at_full_proportion_matches(self):
        rng = np.random.default_rng(9)
        n_anom, n_nat = 40, 160
        scores = np.concatenate([rng.normal(size=n_nat), rng.normal(size=n_anom) + 1])
        labels = np.concatenate([np.zeros(n_nat, bool), np.ones(n_anom, bool)])
        ls = LabeledScores(scores, labels)
        p_full = n_anom / (n_anom + n_nat)
        rows = proportion_sweep(ls, proportions=[p_full], repeats=5, seed=1)
        assert rows[0]["average_precision"] == pytest.approx(
            average_precision(ls)
        )

    def test_proportion_sweep_deterministic(self):
        ls = self._scored(seed=10)
        a = proportion_sweep(ls, repeats=10, seed=3)
        b = proportion_sweep(ls, repeats=10, seed=3)
        assert a == b
