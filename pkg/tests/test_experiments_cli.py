import csv
import json

import numpy as np
import pytest

from kgssl.analysis import corr, metric_table, rmse
from kgssl.cli import main
from kgssl.errors import ConfigError
from kgssl.experiments import PRESETS, run_experiment
from kgssl.inference import read_estimates_csv

SMALL = {
    "n_entities": "12", "n_days": "300", "n_test": "4",
    "window": "100", "stride": "100", "hidden_size": "8", "batch_entities": "8",
    "epochs": "2", "steps_per_epoch": "4", "seeds": "0,1,2",
}
SMALL_FORWARD = {
    **SMALL, "train_days": "200", "warmup": "20",
    "forward_steps": "3", "forward_hidden_size": "4", "forward_sequence_length": "100", "forward_batch_entities": "4",
}


def read_truth(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return [r[0] for r in rows[1:]], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


@pytest.fixture(scope="module")
def clean_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    return out, run_experiment("synthetic-clean", out, SMALL)


class TestRunExperiment:
    def test_smoke(self, clean_run):
        out, rep = clean_run
        assert len(rep.metrics) == 3
        for name in ("metrics.csv", "report.json", "provenance.json", "truth_test.csv", "checkpoints/seed0.kgssl"):
            assert (out / name).exists(), name

    def test_rerun_identical(self, clean_run, tmp_path):
        out, _ = clean_run
        run_experiment("synthetic-clean", tmp_path / "b", SMALL)
        for path in sorted(p for p in out.rglob("*") if p.is_file()):
            assert path.read_bytes() == (tmp_path / "b" / path.relative_to(out)).read_bytes(), path.name

    def test_report_recomputable(self, clean_run):
        out, _ = clean_run
        report = json.loads((out / "report.json").read_text())
        ids, truth = read_truth(out / "truth_test.csv")
        est_ids, names, est = read_estimates_csv(out / "estimates_test_ensemble.csv")
        assert est_ids == ids
        with open(out / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        for j, row in enumerate(rows):
            assert float(row["rmse"]) == rmse(est[:, j], truth[:, j])
            assert float(row["corr"]) == corr(est[:, j], truth[:, j])
        per_seed = []
        for seed in (0, 1, 2):
            _, _, e = read_estimates_csv(out / f"estimates_test_seed{seed}.csv")
            per_seed.append(np.mean([r["corr"] for r in metric_table(e, truth, names)]))
            assert report["per_seed"][str(seed)]["mean_corr"] == pytest.approx(per_seed[-1], abs=1e-12)
        assert report["median_seed_corr"] == pytest.approx(np.median(per_seed), abs=1e-12)

    def test_provenance(self, clean_run):
        out, rep = clean_run
        prov = json.loads((out / "provenance.json").read_text())
        assert prov["seeds"] == [0, 1, 2] and prov["version_id"].startswith("0.1.0+")
        assert prov["settings"]["n_entities"] == 12

    def test_noise_run_reports_denoising(self, tmp_path):
        rep = run_experiment("noise50", tmp_path, SMALL)
        den = rep.extra["denoising"]
        assert rep.extra["corrupted_entities"] == 4
        assert np.isfinite(den["rmse_corrupted"]) and np.isfinite(den["median_rmse_reconstructed"])

    def test_forward_preset(self, tmp_path):
        rep = run_experiment("forward", tmp_path, SMALL_FORWARD)
        assert set(rep.nse) == {"none", "embedding", "measured", "measured_noisy"}
        assert (tmp_path / "forward" / "embedding_seed1" / "predictions.csv").exists()

    def test_unknown_preset(self, tmp_path):
        with pytest.raises(ConfigError, match="synthetic-clean"):
            run_experiment("nope", tmp_path, {})

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError):
            run_experiment("synthetic-clean", tmp_path, {"colour": "blue"})

    def test_camels_needs_root(self, tmp_path, monkeypatch):
        from kgssl.errors import DataError

        monkeypatch.delenv("KGSSL_DATA_ROOT", raising=False)
        with pytest.raises(DataError):
            run_experiment("camels-table1", tmp_path, {})

    def test_preset_catalogue(self):
        assert {"synthetic-clean", "noise50", "noise90", "missing", "unsupervised", "forward", "camels-table1"} <= set(PRESETS)


class TestCli:
    def test_pipeline(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert main(["--seed", "1", "--out-dir", str(data), "synth", "--entities", "8", "--days", "250"]) == 0
        cfg = tmp_path / "train.cfg"
        cfg.write_text("window = 100\nstride = 100\nhidden_size = 8\nbatch_entities = 4\nepochs = 1\nsteps_per_epoch = 3\n"
                       "forward_steps = 2\nforward_hidden_size = 4\nforward_sequence_length = 100\nforward_warmup = 10\n")
        common = ["--config", str(cfg), "--seed", "0"]
        assert main([*common, "--out-dir", str(tmp_path / "ck"), "train", "--data", str(data)]) == 0
        ck = str(tmp_path / "ck" / "seed0.kgssl")
        assert main(["--out-dir", str(tmp_path / "est"), "estimate", "--data", str(data), "--checkpoint", ck, "--checkpoint", ck]) == 0
        assert main(["--out-dir", str(tmp_path / "rep"), "report", "--estimates", str(tmp_path / "est" / "estimates.csv"),
                     "--truth", str(data / "attributes_truth.csv"), "--stats-from", ck,
                     "--embeddings", str(tmp_path / "est" / "embeddings.csv")]) == 0
        assert (tmp_path / "rep" / "distance_embeddings.csv").exists()
        assert main([*common, "--out-dir", str(tmp_path / "fw"), "forward-train", "--data", str(data), "--conditioning", "none"]) == 0
        assert main([*common, "--out-dir", str(tmp_path / "fe"), "forward-eval", "--data", str(data), "--conditioning", "none",
                     "--model", str(tmp_path / "fw" / "forward.kgfwd")]) == 0
        assert json.loads((tmp_path / "fe" / "summary.json").read_text())["arm"] == "none"
        assert main(["--seed", "2", "--out-dir", str(tmp_path / "cor"), "corrupt", "--data", str(data), "--fraction", "0.5"]) == 0
        assert main(["--seed", "2", "--out-dir", str(tmp_path / "msk"), "mask", "--data", str(data), "--fraction", "0.5"]) == 0
        attrs = (tmp_path / "msk" / "attributes.csv").read_text().splitlines()[1:]
        assert sum(line.endswith(",,") for line in attrs) == 4

    def test_exit_codes(self, tmp_path, monkeypatch):
        monkeypatch.delenv("KGSSL_DATA_ROOT", raising=False)
        assert main(["run", "nope"]) == 2
        assert main(["train"]) == 2
        assert main(["train", "--data", str(tmp_path / "missing")]) == 3
        bad = tmp_path / "bad.kgssl"
        bad.write_bytes(b"not a container")
        (tmp_path / "d" / "forcing").mkdir(parents=True)
        assert main(["estimate", "--data", str(tmp_path / "d"), "--checkpoint", str(bad)]) == 3

    def test_run_with_overrides(self, tmp_path):
        args = ["--out-dir", str(tmp_path), "run", "synthetic-clean"]
        for k, v in SMALL.items():
            args += ["--set", f"{k}={v}"]
        assert main(args) == 0
        assert (tmp_path / "synthetic-clean" / "report.json").exists()
        assert main(["--out-dir", str(tmp_path), "run", "synthetic-clean", "--set", "window"]) == 2
