import json
import os

import numpy as np
import pytest

from layerguard.cli import main, read_scores_csv, write_attack_csv
from layerguard.dataset import load_dataset, write_dataset
from layerguard.synthetic import gaussian_blobs
from layerguard.toynet import ToyNetwork, export_representations, save_network, train_toy


@pytest.fixture(scope="module")
def tiny_world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    x_cal, y_cal = gaussian_blobs(300, 3, 2, 1.2, seed=[31, 0], box_margin=2.0)
    x_test, y_test = gaussian_blobs(150, 3, 2, 1.2, seed=[31, 1], box_margin=2.0)
    x_train, y_train = gaussian_blobs(300, 3, 2, 1.2, seed=[31, 2], box_margin=2.0)
    net = ToyNetwork([2, 8, 3], ["tanh"], seed=31)
    net = train_toy(net, x_train, y_train, epochs=60, lr=0.1, seed=31)
    cal_dir = str(root / "cal")
    test_dir = str(root / "test")
    write_dataset(export_representations(net, x_cal, y_cal), cal_dir)
    write_dataset(export_representations(net, x_test, y_test), test_dir)
    net_dir = str(root / "net")
    save_network(net, net_dir)
    fit_out = str(root / "fit_out")
    code = main([
        "fit", "--dataset", cal_dir, "--out", fit_out, "--seed", "5",
        "--dim-reduce", "none", "--alpha", "0.1",
    ])
    assert code == 0
    return {
        "root": root,
        "cal": cal_dir,
        "test": test_dir,
        "net": net_dir,
        "model": os.path.join(fit_out, "model"),
    }


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestFit:
    def test_model_dir_written(self, tiny_world):
        assert os.path.isfile(os.path.join(tiny_world["model"], "detector.json"))

    def test_run_manifest_written(self, tiny_world):
        man = os.path.join(os.path.dirname(tiny_world["model"]), "run_manifest.json")
        with open(man) as fh:
            data = json.load(fh)
        assert data["command"] == "fit"

    def test_missing_dataset_exit_2(self, tmp_path):
        code = main(["fit", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_bad_flag_exit_1(self, tmp_path):
        code = main([
            "fit", "--dataset", "x", "--out", str(tmp_path / "o"),
            "--combiner", "bogus",
        ])
        assert code == 1


class TestScore:
    def test_adversarial_columns(self, tiny_world, tmp_path):
        out = str(tmp_path / "score_adv")
        assert main([
            "score", "--dataset", tiny_world["test"], "--model-dir", tiny_world["model"],
            "--task", "adversarial", "--out", out,
        ]) == 0
        rows = read_scores_csv(os.path.join(out, "scores.csv"))
        assert "corrected_class" in rows
        assert rows["sample_id"].size == 150

    def test_ood_omits_corrected(self, tiny_world, tmp_path):
        out = str(tmp_path / "score_ood")
        assert main([
            "score", "--dataset", tiny_world["test"], "--model-dir", tiny_world["model"],
            "--task", "ood", "--out", out,
        ]) == 0
        rows = read_scores_csv(os.path.join(out, "scores.csv"))
        assert "corrected_class" not in rows
        assert "ood_score" in rows

    def test_idempotent_bytes(self, tiny_world, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            assert main([
                "score", "--dataset", tiny_world["test"], "--model-dir", tiny_world["model"],
                "--out", out, "--seed", "3",
            ]) == 0
            outs.append(_read_bytes(os.path.join(out, "scores.csv")))
        assert outs[0] == outs[1]

    def test_layer_mismatch_exit_2(self, tiny_world, tmp_path):
        ds = load_dataset(tiny_world["test"])
        from layerguard.dataset import LayerDataset

        chopped = LayerDataset(ds.layers[:1], ds.true_labels, ds.pred_labels, ds.num_classes)
        bad_dir = str(tmp_path / "bad_ds")
        write_dataset(chopped, bad_dir)
        code = main([
            "score", "--dataset", bad_dir, "--model-dir", tiny_world["model"],
            "--out", str(tmp_path / "o"),
        ])
        assert code == 2


def _craft_score_csv(path, scores):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_id,pred_class,adv_score,ood_score,detected,corrected_class\n")
        for i, s in enumerate(scores):
            fh.write(f"{i},0,{s:.17g},{abs(s):.17g},0,0\n")


class TestEvaluate:
    @pytest.fixture()
    def score_files(self, tmp_path):
        rng = np.random.default_rng(0)
        nat = rng.normal(size=120)
        anom = rng.normal(size=60) + 2.5
        nat_csv = str(tmp_path / "nat.csv")
        anom_csv = str(tmp_path / "anom.csv")
        _craft_score_csv(nat_csv, nat)
        _craft_score_csv(anom_csv, anom)

        class Res:
            pass

        results = []
        for i in range(60):
            r = Res()
            r.source_class, r.target_class = 0, 1
            r.success = i % 3 != 0
            r.lambda_used = 0.5
            r.l2_norm = float(rng.random() + 0.1)
            r.iterations = 10
            results.append(r)
        attack_csv = str(tmp_path / "attack.csv")
        write_attack_csv(attack_csv, results)
        return nat_csv, anom_csv, attack_csv

    def test_outputs(self, score_files, tmp_path):
        nat_csv, anom_csv, attack_csv = score_files
        out = str(tmp_path / "eval")
        assert main([
            "evaluate", "--natural", nat_csv, "--anomalous", anom_csv,
            "--attack-csv", attack_csv, "--out", out, "--seed", "2",
        ]) == 0
        for name in (
            "metrics.csv", "sweep_proportion.csv", "sweep_proportion.png",
            "sweep_norm.csv", "sweep_norm.png", "pr_curve.png", "score_hist.png",
            "run_manifest.json",
        ):
            assert os.path.isfile(os.path.join(out, name)), name

    def test_sweep_csv_schema(self, score_files, tmp_path):
        nat_csv, anom_csv, _ = score_files
        out = str(tmp_path / "eval2")
        assert main([
            "evaluate", "--natural", nat_csv, "--anomalous", anom_csv,
            "--out", out, "--seed", "2",
        ]) == 0
        with open(os.path.join(out, "sweep_proportion.csv")) as fh:
            header = fh.readline().strip()
            first = fh.readline().strip().split(",")
        assert header == "x_value,metric_name,value"
        assert first[1] in ("average_precision", "pauc")

    def test_png_bytes_deterministic(self, score_files, tmp_path):
        nat_csv, anom_csv, _ = score_files
        blobs = []
        for name in ("e1", "e2"):
            out = str(tmp_path / name)
            assert main([
                "evaluate", "--natural", nat_csv, "--anomalous", anom_csv,
                "--out", out, "--seed", "2",
            ]) == 0
            blobs.append(_read_bytes(os.path.join(out, "pr_curve.png")))
        assert blobs[0] == blobs[1]

    def test_misaligned_attack_csv_exit_2(self, score_files, tmp_path):
        nat_csv, anom_csv, _ = score_files
        short_csv = str(tmp_path / "short.csv")
        with open(short_csv, "w") as fh:
            fh.write("sample_id,source_class,target_class,success,lambda,l2_norm,iterations\n")
            fh.write("0,0,1,1,0.5,0.1,10\n")
        code = main([
            "evaluate", "--natural", nat_csv, "--anomalous", anom_csv,
            "--attack-csv", short_csv, "--out", str(tmp_path / "o"),
        ])
        assert code == 2


class TestAttackCmd:
    def test_attack_outputs(self, tiny_world, tmp_path):
        out = str(tmp_path / "atk")
        code = main([
            "attack", "--dataset", tiny_world["test"], "--model-dir", tiny_world["model"],
            "--network-dir", tiny_world["net"], "--reference", tiny_world["cal"],
            "--num-samples", "3", "--max-iters", "40", "--out", out, "--seed", "1",
            "--workers", "1",
        ])
        assert code == 0
        assert os.path.isfile(os.path.join(out, "attack_results.csv"))
        attacked = load_dataset(os.path.join(out, "attacked_dataset"))
        assert attacked.num_samples == 3


class TestConfigFile:
    def test_unknown_key_rejected(self, tiny_world, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus_key": 1}))
        code = main([
            "score", "--dataset", tiny_world["test"], "--model-dir", tiny_world["model"],
            "--out", str(tmp_path / "o"), "--config", str(cfg),
        ])
        assert code == 1

    def test_flags_win_over_config(self, tiny_world, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"task": "ood", "seed": 9}))
        out = str(tmp_path / "merged")
        assert main([
            "score", "--dataset", tiny_world["test"], "--model-dir", tiny_world["model"],
            "--out", out, "--config", str(cfg), "--task", "adversarial",
        ]) == 0
        rows = read_scores_csv(os.path.join(out, "scores.csv"))
        # explicit --task adversarial wins; config seed applied silently
        assert "corrected_class" in rows


class TestDemoCmd:
    def test_smoke_and_reproducible(self, tmp_path):
        args = [
            "demo", "--seed", "3", "--n-train", "300", "--n-cal", "300",
            "--n-test", "150", "--n-noise", "80", "--n-attack", "4",
            "--epochs", "60", "--attack-iters", "60", "--workers", "1",
        ]
        outs = []
        for name in ("d1", "d2"):
            out = str(tmp_path / name)
            assert main(args + ["--out", out]) == 0
            assert os.path.isfile(os.path.join(out, "summary.json"))
            assert os.path.isdir(os.path.join(out, "model"))
            assert os.path.isfile(os.path.join(out, "plots", "ood_scores.png"))
            outs.append(_read_bytes(os.path.join(out, "summary.json")))
        assert outs[0] == outs[1]
