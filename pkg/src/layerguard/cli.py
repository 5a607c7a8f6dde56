"""Command-line front end: fit, score, evaluate, attack, demo.

Flags may be defaulted from a JSON config file (--config); explicit flags
win, and unknown config keys are rejected. Every command writes its outputs
under --out together with a machine-readable run manifest, and identical
inputs plus seed produce byte-identical outputs.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import metrics as mt
from .attack import AttackConfig
from .dataset import DatasetFormatError, load_dataset, validate_dataset, write_dataset
from .demo import DemoSettings, run_demo, _attack_batch
from .detector import DetectorConfig, fit_detector, load_detector, save_detector, score_dataset
from .toynet import load_network

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    return str(value)


def write_scores_csv(path, scored, task):
    """One row per sample; the ood task has no corrected prediction."""
    cols = ["sample_id", "pred_class", "adv_score", "ood_score", "detected"]
    if task != "ood":
        cols.append("corrected_class")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for r in scored:
            row = [r.sample_id, r.pred_class, r.adv_score, r.ood_score, r.detected]
            if task != "ood":
                row.append(r.corrected_class)
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def read_scores_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    out = {name: [] for name in header}
    for row in rows:
        if len(row) != len(header):
            raise DatasetFormatError(f"malformed score row in {path}: {row}")
        for name, val in zip(header, row):
            out[name].append(val)
    for name in out:
        conv = float if name.endswith("score") else int
        out[name] = np.array([conv(v) for v in out[name]])
    return out


def write_attack_csv(path, results):
    cols = ["sample_id", "source_class", "target_class", "success", "lambda", "l2_norm", "iterations"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for i, r in enumerate(results):
            fh.write(
                ",".join(
                    _fmt(v)
                    for v in [i, r.source_class, r.target_class, r.success,
                              r.lambda_used, r.l2_norm, r.iterations]
                )
                + "\n"
            )
    return path


def read_attack_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    out = {name: [] for name in header}
    for row in rows:
        for name, val in zip(header, row):
            out[name].append(val)
    conv = {"lambda": float, "l2_norm": float}
    for name in out:
        out[name] = np.array([conv.get(name, int)(v) for v in out[name]])
    return out


def write_sweep_csv(path, rows, x_key):
    """Melted sweep rows: x_value, metric_name, value."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x_value,metric_name,value\n")
        for row in rows:
            for name in ("average_precision", "pauc"):
                fh.write(f"{_fmt(row[x_key])},{name},{_fmt(row[name])}\n")
    return path


def _write_manifest(out_dir, command, options, outputs):
    manifest = {
        "command": command,
        "options": {k: v for k, v in sorted(options.items()) if v is not None},
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


# -- argument plumbing --------------------------------------------------------


def _add_common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with flag defaults")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel workers (default: available cores)")


def build_parser():
    parser = _Parser(prog="layerguard", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a detector on a calibration dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model-dir", default=None, help="model output (default: OUT/model)")
    p.add_argument("--stats", default=None, help="comma list of multinomial,binomial,trust,lid")
    p.add_argument("--combiner", choices=["fisher", "hmp", "aklpe"], default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--pairs", choices=["auto", "on", "off"], default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--dim-reduce", choices=["none", "pca", "npp"], default=None)
    p.add_argument("--metric", choices=["cosine", "euclidean"], default=None)
    _add_common(p)

    p = sub.add_parser("score", help="score a dataset with a fitted detector")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--task", choices=["adversarial", "ood"], default="adversarial")
    _add_common(p)

    p = sub.add_parser("evaluate", help="metrics and plots from score files")
    p.add_argument("--natural", required=True, help="score CSV of natural samples")
    p.add_argument("--anomalous", required=True, help="score CSV of anomalous samples")
    p.add_argument("--task", choices=["adversarial", "ood"], default="adversarial")
    p.add_argument("--attack-csv", default=None,
                   help="attack results CSV; filters to successes and enables the norm sweep")
    p.add_argument("--pauc-alpha", type=float, default=0.2)
    _add_common(p)

    p = sub.add_parser("attack", help="run the custom attack against a fitted detector")
    p.add_argument("--dataset", required=True, help="dataset to attack (input layer first)")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--network-dir", required=True, help="toy network directory")
    p.add_argument("--reference", required=True, help="calibration dataset for soft counts")
    p.add_argument("--num-samples", type=int, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--loss-variant", choices=["targeted", "untargeted", "alternate"], default=None)
    p.add_argument("--timeout", type=float, default=None, help="per-sample seconds")
    _add_common(p)

    p = sub.add_parser("demo", help="full synthetic pipeline in one command")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--n-attack", type=int, default=None)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-cal", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--n-noise", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--attack-iters", type=int, default=None)
    _add_common(p)
    return parser


def _merge_config(args, parser_keys):
    """Apply config-file defaults for flags not given; flags win."""
    if not getattr(args, "config", None):
        return args
    with open(args.config, "r", encoding="utf-8") as fh:
        try:
            overrides = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
    unknown = set(overrides) - parser_keys
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key, value in overrides.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


def _detector_config(args):
    kw = {}
    if args.stats:
        kw["stat_kinds"] = tuple(s.strip() for s in args.stats.split(",") if s.strip())
    if args.combiner:
        kw["combiner"] = args.combiner
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    if args.pairs is not None:
        kw["use_pairs"] = None if args.pairs == "auto" else args.pairs == "on"
    if args.k is not None:
        kw["k"] = args.k
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.dim_reduce is not None:
        kw["dim_reduce"] = None if args.dim_reduce == "none" else args.dim_reduce
    if args.metric is not None:
        kw["metric"] = args.metric
    try:
        return DetectorConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# -- commands -------------------------------------------------------------------


def cmd_fit(args):
    ds = load_dataset(args.dataset)
    report = validate_dataset(ds)
    for line in report.lines():
        print(line)
    config = _detector_config(args)
    model = fit_detector(ds, config)
    model_dir = args.model_dir or os.path.join(args.out, "model")
    save_detector(model, model_dir)
    print(f"threshold (adversarial): {model.tau_adv:.6g}"
          + (" [degenerate]" if model.degenerate_adv else ""))
    print(f"threshold (ood): {model.tau_ood:.6g}"
          + (" [degenerate]" if model.degenerate_ood else ""))
    print(f"model written to {model_dir}")
    _write_manifest(args.out, "fit", vars(args), [model_dir])
    return EXIT_OK


def cmd_score(args):
    ds = load_dataset(args.dataset)
    model = load_detector(args.model_dir)
    scored = score_dataset(model, ds, task=args.task)
    path = os.path.join(args.out, "scores.csv")
    write_scores_csv(path, scored, args.task)
    detected = sum(r.detected for r in scored)
    print(f"scored {len(scored)} samples; detected {detected}")
    _write_manifest(args.out, "score", vars(args), [path])
    return EXIT_OK


def cmd_evaluate(args):
    from . import plotting

    natural = read_scores_csv(args.natural)
    anomalous = read_scores_csv(args.anomalous)
    score_col = "adv_score" if args.task == "adversarial" else "ood_score"
    nat_scores = natural[score_col]
    anom_scores = anomalous[score_col]
    norms = None
    if args.attack_csv:
        attack = read_attack_csv(args.attack_csv)
        if attack["sample_id"].size != anom_scores.size:
            raise DatasetFormatError(
                "attack CSV rows do not align with the anomalous score file"
            )
        keep = attack["success"] == 1
        anom_scores = anom_scores[keep]
        norms = attack["l2_norm"][keep]
    if anom_scores.size == 0:
        raise DatasetFormatError("no anomalous samples to evaluate")

    ls = mt.LabeledScores(
        scores=np.concatenate([nat_scores, anom_scores]),
        is_anomalous=np.concatenate(
            [np.zeros(nat_scores.size, dtype=bool), np.ones(anom_scores.size, dtype=bool)]
        ),
        norms=norms,
    )
    outputs = []
    ap = mt.average_precision(ls)
    pa = mt.pauc(ls, args.pauc_alpha)
    metrics_path = os.path.join(args.out, "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write("metric_name,value\n")
        fh.write(f"average_precision,{_fmt(ap)}\n")
        fh.write(f"pauc_{args.pauc_alpha:g},{_fmt(pa)}\n")
    outputs.append(metrics_path)
    print(f"average precision: {ap:.4f}   pAUC-{args.pauc_alpha:g}: {pa:.4f}")

    seed = args.seed if args.seed is not None else 0
    prop_rows = mt.proportion_sweep(ls, seed=seed, pauc_alpha=args.pauc_alpha)
    outputs.append(write_sweep_csv(os.path.join(args.out, "sweep_proportion.csv"),
                                   prop_rows, "proportion"))
    outputs.append(plotting.plot_sweep(
        prop_rows, "proportion", os.path.join(args.out, "sweep_proportion.png"),
        "metrics vs anomalous proportion", "anomalous proportion",
    ))
    if norms is not None:
        norm_rows = mt.norm_sweep(ls, pauc_alpha=args.pauc_alpha)
        outputs.append(write_sweep_csv(os.path.join(args.out, "sweep_norm.csv"),
                                       norm_rows, "max_norm"))
        outputs.append(plotting.plot_sweep(
            norm_rows, "max_norm", os.path.join(args.out, "sweep_norm.png"),
            "metrics vs perturbation norm", "max perturbation L2 norm",
        ))
    outputs.append(plotting.plot_pr_curve(
        ls, os.path.join(args.out, "pr_curve.png"), "precision-recall"
    ))
    outputs.append(plotting.plot_score_groups(
        {"natural": nat_scores, "anomalous": anom_scores},
        os.path.join(args.out, "score_hist.png"), "score distributions",
    ))
    _write_manifest(args.out, "evaluate", vars(args), outputs)
    return EXIT_OK


def cmd_attack(args):
    ds = load_dataset(args.dataset)
    ref = load_dataset(args.reference)
    model = load_detector(args.model_dir)
    net = load_network(args.network_dir)
    n = args.num_samples or ds.num_samples
    config_kw = {}
    if args.max_iters is not None:
        config_kw["max_iters"] = args.max_iters
    if args.loss_variant is not None:
        config_kw["loss_variant"] = args.loss_variant
    if args.timeout is not None:
        config_kw["timeout_seconds"] = args.timeout
    if args.seed is not None:
        config_kw["seed"] = args.seed
    config = AttackConfig(**config_kw)

    inputs = ds.layers[0].matrix
    labels = ds.true_labels
    keep = []
    from .toynet import predict

    preds = predict(net, inputs)
    for i in range(ds.num_samples):
        if preds[i] == labels[i]:
            keep.append(i)
        if len(keep) >= n:
            break
    if not keep:
        raise DatasetFormatError("no correctly-classified samples to attack")
    keep = np.array(keep)
    workers = args.workers or (os.cpu_count() or 1)
    results = _attack_batch(
        net, model, inputs[keep], labels[keep],
        ref.layers[0].matrix, ref.true_labels, config, workers,
    )
    csv_path = write_attack_csv(os.path.join(args.out, "attack_results.csv"), results)
    from .toynet import export_representations

    adv_ds = export_representations(net, np.array([r.x_adv for r in results]), labels[keep])
    adv_dir = os.path.join(args.out, "attacked_dataset")
    write_dataset(adv_ds, adv_dir)
    successes = sum(r.success for r in results)
    print(f"attacked {len(results)} samples; {successes} successes")
    _write_manifest(args.out, "attack", vars(args), [csv_path, adv_dir])
    return EXIT_OK


def cmd_demo(args):
    kw = {}
    flags = {
        "seed": "seed", "alpha": "alpha", "n_attack": "n_attack",
        "workers": "workers", "n_train": "n_train", "n_cal": "n_cal",
        "n_test": "n_test", "n_noise": "n_noise", "epochs": "epochs",
        "attack_iters": "attack_max_iters",
    }
    for flag, field in flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            kw[field] = value
    settings = DemoSettings(**kw)
    results, _ = run_demo(args.out, settings)
    for key in sorted(results):
        print(f"{key}: {results[key]}")
    _write_manifest(args.out, "demo", vars(args), [os.path.join(args.out, "summary.json")])
    return EXIT_OK


_COMMANDS = {
    "fit": cmd_fit,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "demo": cmd_demo,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        parser_keys = set(vars(args))
        args = _merge_config(args, parser_keys)
        if getattr(args, "out", None):
            os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
