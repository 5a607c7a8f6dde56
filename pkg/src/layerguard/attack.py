"""Defense-aware attack against kNN layer-statistics detectors.

The attack perturbs an input so that, across the network's layers, the
kernel-smoothed neighbor mass of the source class drops while the target
class's mass grows, under a squared-L2 penalty. The box constraint is
enforced by a tanh change of variables, the inner minimization runs RMSProp,
and the penalty constant is chosen by bisection as the smallest value that
flips the defended (detector-corrected) prediction.

Kernels use squared euclidean layer distances by default: the smooth path
needs a differentiable distance, so the cosine default used elsewhere is
opt-in here.
"""

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .knn import default_k
from .toynet import forward, input_gradient

logger = logging.getLogger(__name__)

_ATANH_CLIP = 1e-6


@dataclass
class AttackConfig:
    lambda_lo: float = 1e-3
    lambda_hi: float = 1e3
    bisection_steps: int = 10
    max_iters: int = 1000
    step_size: float = 0.01
    decay: float = 0.9
    momentum: float = 0.9
    epsilon: float = 1e-8
    kernel_alpha: float = 0.5
    loss_variant: str = "targeted"  # targeted | untargeted | alternate
    layer_distance: str = "euclidean"  # euclidean | cosine
    k: int | None = None
    abort_early: bool = True
    abort_check_every: int = 50
    timeout_seconds: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lambda_lo < self.lambda_hi:
            raise ValueError("lambda bounds must be positive and ordered")
        if self.bisection_steps < 1 or self.max_iters < 1:
            raise ValueError("step counts must be >= 1")
        if self.loss_variant not in ("targeted", "untargeted", "alternate"):
            raise ValueError(f"unknown loss variant: {self.loss_variant!r}")
        if self.layer_distance not in ("euclidean", "cosine"):
            raise ValueError(f"unknown layer distance: {self.layer_distance!r}")


@dataclass
class KernelScales:
    sigmas: np.ndarray

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if np.any(~np.isfinite(self.sigmas)) or np.any(self.sigmas <= 0):
            raise ValueError("kernel scales must be positive and finite")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    lambda_used: float
    l2_norm: float
    iterations: int
    source_class: int
    target_class: int
    # Smallest-norm iterate seen anywhere in the search that flipped the
    # network's (undefended) prediction; None when the network never flipped.
    x_flip: np.ndarray | None = None
    flip_norm: float | None = None
    flip_class: int | None = None


def _distances(mode, u, ref, ref_unit=None):
    if mode == "euclidean":
        diff = u - ref
        return np.sqrt(np.sum(diff * diff, axis=1))
    nu = np.linalg.norm(u)
    if nu == 0.0:
        raise ValueError("zero-norm representation under cosine layer distance")
    cos = (ref_unit if ref_unit is not None else ref / np.linalg.norm(ref, axis=1, keepdims=True)) @ (u / nu)
    return np.clip(1.0 - cos, 0.0, 2.0)


def kernel_scale(x_rep, layer_points, k, alpha=0.5, distance="euclidean", num_candidates=50):
    """Kernel scale for one layer by line search.

    Maximizes (1 - alpha) * h1 + alpha * h2 over a logarithmic grid around
    the k-th neighbor distance, where h1 is the kernel mass captured by the
    k nearest reference points and h2 their normalized kernel entropy.
    Degenerate all-equal distances short-circuit to the common distance.
    """
    pts = np.asarray(layer_points, dtype=np.float64)
    if pts.shape[0] < k + 1:
        raise ValueError(f"need at least k+1={k + 1} reference points, got {pts.shape[0]}")
    d = _distances(distance, np.asarray(x_rep, dtype=np.float64), pts)
    order = np.argsort(d, kind="stable")
    d_nn = d[order[:k]]
    if d_nn[-1] <= 0.0:
        raise ValueError("k-th neighbor distance is zero; kernel scale undefined")
    if np.allclose(d, d[0], rtol=1e-9, atol=0.0):
        logger.warning("all reference distances equal; returning the common distance")
        return float(d[0])
    d2 = d * d
    d2_nn = d_nn * d_nn
    candidates = np.exp(
        np.linspace(math.log(0.1 * d_nn[-1]), math.log(10.0 * d_nn[-1]), num_candidates)
    )
    best_sigma, best_val = None, -np.inf
    for sigma in candidates:
        t_all = -d2 / (sigma * sigma)
        t_nn = -d2_nn / (sigma * sigma)
        h1 = math.exp(logsumexp(t_nn) - logsumexp(t_all))
        if k == 1:
            h2 = 1.0
        else:
            q = np.exp(t_nn - logsumexp(t_nn))
            ent = -np.sum(q * np.log(np.maximum(q, 1e-300)))
            h2 = ent / math.log(k)
        val = (1.0 - alpha) * h1 + alpha * h2
        if val > best_val:
            best_sigma, best_val = float(sigma), val
    return best_sigma


class AttackWorkspace:
    """Precomputed reference representations and kernel machinery.

    Holds, per trace layer, the reference matrix (reference samples pushed
    through the network), its class labels, and the fitted kernel scales.
    """

    def __init__(self, net, reference_inputs, reference_labels, scales=None,
                 distance="euclidean", k=None, kernel_alpha=0.5):
        self.net = net
        self.distance = distance
        self.labels = np.asarray(reference_labels, dtype=np.int64)
        acts, _ = net.forward_batch(np.asarray(reference_inputs, dtype=np.float64))
        self.ref_reps = acts
        self.ref_unit = None
        if distance == "cosine":
            self.ref_unit = [
                r / np.linalg.norm(r, axis=1, keepdims=True) for r in acts
            ]
        self.k = k or default_k(self.labels.size)
        self.kernel_alpha = kernel_alpha
        self.scales = scales
        self.m = int(self.labels.max()) + 1
        self.class_masks = [self.labels == c for c in range(self.m)]

    def fit_scales(self, x):
        """Per-layer kernel scales for a clean input."""
        trace = forward(self.net, x)
        sig = [
            kernel_scale(
                trace.layers[l], self.ref_reps[l], self.k, alpha=self.kernel_alpha,
                distance=self.distance,
            )
            for l in range(len(self.ref_reps))
        ]
        self.scales = KernelScales(np.array(sig))
        return self.scales

    # -- kernel terms ---------------------------------------------------------

    def _layer_terms(self, u, l):
        """(terms, cache): log-kernel values against layer-l references."""
        s2 = self.scales.sigmas[l] ** 2
        ref = self.ref_reps[l]
        if self.distance == "euclidean":
            diff = u - ref
            terms = -np.sum(diff * diff, axis=1) / s2
            return terms, ("euc", diff, s2)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            raise ValueError("zero-norm representation under cosine layer distance")
        u_hat = u / nu
        cos = self.ref_unit[l] @ u_hat
        d = np.clip(1.0 - cos, 0.0, 2.0)
        terms = -(d * d) / s2
        return terms, ("cos", u_hat, nu, cos, d, s2, l)

    def _cotangent(self, weights, cache):
        """Sum of weights times the gradient of each term w.r.t. the layer rep."""
        if cache[0] == "euc":
            _, diff, s2 = cache
            return (-2.0 / s2) * (weights @ diff)
        _, u_hat, nu, cos, d, s2, l = cache
        wd = weights * d
        vec = wd @ self.ref_unit[l] - float(np.sum(wd * cos)) * u_hat
        return (2.0 / (s2 * nu)) * vec

    def class_mass(self, x_pert, cls):
        """Raw kernel mass of one class summed over all layers."""
        trace = forward(self.net, np.asarray(x_pert, dtype=np.float64))
        mask = self.class_masks[cls]
        total = 0.0
        for l in range(len(self.ref_reps)):
            terms, _ = self._layer_terms(trace.layers[l], l)
            total += float(np.sum(np.exp(terms[mask])))
        return total

    # -- objective -------------------------------------------------------------

    def _group_logmass_and_cots(self, layers_u, mask, per_layer=False):
        """Log kernel mass of a reference group and cotangents per layer."""
        all_terms, caches = [], []
        for l, u in enumerate(layers_u):
            terms, cache = self._layer_terms(u, l)
            all_terms.append(terms[mask])
            caches.append(cache)
        if per_layer:
            logs, cots = [], []
            for l, t in enumerate(all_terms):
                lm = logsumexp(t)
                logs.append(lm)
                w_full = np.zeros(self.labels.size)
                w_full[mask] = np.exp(t - lm)
                cots.append(self._cotangent(w_full, caches[l]))
            return logs, cots
        joint = np.concatenate(all_terms)
        lm = logsumexp(joint)
        cots = []
        for l, t in enumerate(all_terms):
            w_full = np.zeros(self.labels.size)
            w_full[mask] = np.exp(t - lm)
            cots.append(self._cotangent(w_full, caches[l]))
        return lm, cots

    def objective(self, zeta, x, source, target, lam, variant):
        """J(zeta) and its gradient with respect to zeta."""
        value, grad, ratio, _ = self.objective_full(zeta, x, source, target, lam, variant)
        return value, grad, ratio

    def objective_full(self, zeta, x, source, target, lam, variant):
        """Like objective, but also reports the network prediction at x+zeta."""
        zeta = np.asarray(zeta, dtype=np.float64)
        x_pert = np.asarray(x, dtype=np.float64) + zeta
        acts, pre = self.net.forward_batch(x_pert[None, :])
        layers_u = [a[0] for a in acts]
        pred = int(np.argmax(acts[-1][0]))

        src_mask = self.class_masks[source]
        if variant == "untargeted":
            tgt_mask = ~src_mask
        else:
            tgt_mask = self.class_masks[target]

        per_layer = variant == "alternate"
        src_lm, src_cots = self._group_logmass_and_cots(layers_u, src_mask, per_layer)
        tgt_lm, tgt_cots = self._group_logmass_and_cots(layers_u, tgt_mask, per_layer)
        if per_layer:
            ratio = float(np.sum(src_lm) - np.sum(tgt_lm))
        else:
            ratio = float(src_lm - tgt_lm)
        value = float(np.sum(zeta * zeta)) + lam * ratio

        cots = [lam * (s - t) for s, t in zip(src_cots, tgt_cots)]
        cots = [c[None, :] for c in cots]
        grad_x, _, _ = self.net.backward_batch(acts, pre, cots)
        grad = 2.0 * zeta + grad_x[0]
        return value, grad, ratio, pred


def attack_objective(zeta, x, workspace, source, target, lam, variant="targeted"):
    """Objective value only; the workspace carries references and scales."""
    return workspace.objective(zeta, x, source, target, lam, variant)[0]


def attack_objective_grad(zeta, x, workspace, source, target, lam, variant="targeted"):
    """(value, gradient) of the attack objective with respect to zeta."""
    value, grad, _ = workspace.objective(zeta, x, source, target, lam, variant)
    return value, grad


# -- box reparameterization -----------------------------------------------------


def to_tanh_space(x, lo, hi):
    u = np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), _ATANH_CLIP, 1.0 - _ATANH_CLIP)
    return np.arctanh(2.0 * u - 1.0)


def from_tanh_space(z, lo, hi):
    # Float tanh saturates to exactly +-1, so clip to keep the box strict.
    t = np.clip(0.5 * (1.0 + np.tanh(z)), _ATANH_CLIP, 1.0 - _ATANH_CLIP)
    return (hi - lo) * t + lo


def _defense_label(net, detector, x):
    trace = forward(net, x)
    mats = [rep[None, :] for rep in trace.layers]
    adv, _, corrected, _ = detector.score_arrays(mats, np.array([trace.pred_class]))
    return int(corrected[0]), float(adv[0])


def bisect_smallest_success(evaluate, lo, hi, steps):
    """Geometric-midpoint bisection for the smallest lambda that succeeds.

    evaluate(lam) returns (success, payload). Returns (best_lambda, payload,
    attempts) where attempts is the list of (lam, success, payload) tried.
    """
    attempts = []
    best = None
    for _ in range(steps):
        lam = math.sqrt(lo * hi)
        success, payload = evaluate(lam)
        attempts.append((lam, success, payload))
        if success:
            hi = lam
            if best is None or lam < best[0]:
                best = (lam, payload)
        else:
            lo = lam
    return best, attempts


def run_attack(net, detector, x, source_class, reference_inputs, reference_labels,
               config=None):
    """Full attack on one correctly-classified input.

    Returns the minimal-lambda success when any bisection step succeeds,
    otherwise the most adversarial failed attempt. Deterministic given the
    config; the optional per-sample timeout trades that determinism away.
    """
    config = config or AttackConfig()
    x = np.asarray(x, dtype=np.float64)
    lo_box, hi_box = net.input_range

    trace = forward(net, x)
    if trace.pred_class != source_class:
        raise ValueError(
            f"input is misclassified (predicted {trace.pred_class}, true {source_class}); "
            "the attack requires an initially-correct prediction"
        )
    initial_label, _ = _defense_label(net, detector, x)
    if initial_label != source_class:
        raise ValueError(
            f"defended prediction is already incorrect ({initial_label} != {source_class}); "
            "no initially-correct prediction to modify"
        )
    order = np.argsort(-trace.probs, kind="stable")
    target_class = int(order[1])

    ws = AttackWorkspace(
        net, reference_inputs, reference_labels, distance=config.layer_distance,
        k=config.k, kernel_alpha=config.kernel_alpha,
    )
    ws.fit_scales(x)

    z0 = to_tanh_space(x, lo_box, hi_box)
    started = time.monotonic()
    timed_out = False
    flip_state = {"x": None, "norm": np.inf, "class": None}

    def inner(lam):
        """RMSProp-with-momentum minimization; returns (success, payload)."""
        w = np.zeros_like(z0)
        cache = np.zeros_like(z0)
        velocity = np.zeros_like(z0)
        best_j = np.inf
        best_x = from_tanh_space(z0, lo_box, hi_box)
        best_ratio = np.inf
        last_check = np.inf
        iters = 0
        for it in range(config.max_iters):
            iters = it + 1
            x_pert = from_tanh_space(z0 + w, lo_box, hi_box)
            j, grad, ratio, pred = ws.objective_full(
                x_pert - x, x, source_class, target_class, lam, config.loss_variant
            )
            if j < best_j:
                best_j, best_x, best_ratio = j, x_pert, ratio
            if pred != source_class:
                norm = float(np.linalg.norm(x_pert - x))
                if norm < flip_state["norm"]:
                    flip_state.update(x=x_pert, norm=norm, **{"class": pred})
            dxdw = (hi_box - lo_box) * 0.5 * (1.0 - np.tanh(z0 + w) ** 2)
            gw = grad * dxdw
            cache[:] = config.decay * cache + (1.0 - config.decay) * gw * gw
            velocity[:] = config.momentum * velocity + config.step_size * gw / (
                np.sqrt(cache) + config.epsilon
            )
            w -= velocity
            if config.abort_early and (it + 1) % config.abort_check_every == 0:
                if best_j > last_check - 1e-9 * max(1.0, abs(last_check)):
                    break
                last_check = best_j
        label, _ = _defense_label(net, detector, best_x)
        success = label != initial_label
        return success, {
            "x_adv": best_x, "iterations": iters, "ratio": best_ratio,
            "objective": best_j,
        }

    def evaluate(lam):
        nonlocal timed_out
        if config.timeout_seconds is not None and time.monotonic() - started > config.timeout_seconds:
            timed_out = True
            return False, {"x_adv": x.copy(), "iterations": 0, "ratio": np.inf,
                           "objective": np.inf, "skipped": True}
        return inner(lam)

    best, attempts = bisect_smallest_success(
        evaluate, config.lambda_lo, config.lambda_hi, config.bisection_steps
    )
    if timed_out:
        logger.warning("attack timed out after %.1fs; later lambda steps skipped",
                       config.timeout_seconds)
    if best is not None:
        lam, payload = best
        success = True
    else:
        # Most adversarial failure: smallest source/target log-mass ratio.
        lam, _, payload = min(attempts, key=lambda a: a[2]["ratio"])
        success = False
    x_adv = payload["x_adv"]
    return AttackResult(
        x_adv=x_adv,
        success=success,
        lambda_used=float(lam),
        l2_norm=float(np.linalg.norm(x_adv - x)),
        iterations=int(payload["iterations"]),
        source_class=int(source_class),
        target_class=target_class,
        x_flip=flip_state["x"],
        flip_norm=None if flip_state["x"] is None else flip_state["norm"],
        flip_class=flip_state["class"],
    )
