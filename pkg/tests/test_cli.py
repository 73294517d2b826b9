import csv
import json

import pytest
from click.testing import CliRunner

from lssl.cli import main

MICRO_CONFIG = {
    "seed": 7,
    "synthgen": {"n_subjects": 12, "grid": 16, "noise_sigma": 0.02},
    "model": {"grid": 16, "widths": [4, 8], "latent": 8},
    "trainer": {"epochs": 2, "batch_images": 16, "batch_pairs": 16},
    "analysis": {"traversal_points": 3},
    "verify": {"n_probes": 4, "holdout_subjects": 6},
    "downstream": {"k_folds": 3, "classifier_epochs": 2, "seeds": [0],
                   "methods": ["lssl", "ae"], "heads": ["mlp", "gru"]},
}


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    config_path = root / "config.json"
    config_path.write_text(json.dumps(MICRO_CONFIG))
    runner = CliRunner()
    out = root / "out"
    for command in ("generate", "train", "verify", "analyze", "classify", "plot"):
        result = runner.invoke(main, [command, "--config", str(config_path),
                                      "--out", str(out)])
        assert result.exit_code == 0, f"{command} failed: {result.output}"
    return root, config_path, out


def test_pipeline_artifacts_exist(pipeline_dir):
    _, _, out = pipeline_dir
    assert (out / "dataset" / "manifest.jsonl").exists()
    assert (out / "dataset" / "generator_config.json").exists()
    assert (out / "train" / "checkpoint_last.pt").exists()
    assert (out / "train" / "metrics.csv").exists()
    assert (out / "analysis" / "analysis.json").exists()
    assert (out / "analysis" / "analysis.csv").exists()
    assert (out / "verify" / "disentanglement.json").exists()
    assert (out / "eval" / "eval.csv").exists()
    assert (out / "eval" / "eval.json").exists()
    for name in ("brain_age_scatter.png", "aging_speed_box.png",
                 "traversal_strip.png", "convergence_cross_sectional.png",
                 "convergence_longitudinal.png"):
        assert (out / "plots" / name).exists()


def test_run_metadata_written(pipeline_dir):
    _, _, out = pipeline_dir
    for stage in ("dataset", "train", "analysis", "verify", "eval", "plots"):
        meta = json.loads((out / stage / "run_meta.json").read_text())
        assert meta["seed"] == 7
        assert len(meta["config_hash"]) == 64
        assert meta["resolved_config"]["synthgen"]["n_subjects"] == 12
        assert "versions" in meta and "wall_seconds" in meta


def test_eval_csv_schema(pipeline_dir):
    _, _, out = pipeline_dir
    with open(out / "eval" / "eval.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    assert set(rows[0]) == {"method", "mode", "setting", "seed", "fold", "epoch",
                            "accuracy"}
    assert {r["method"] for r in rows} == {"lssl", "ae"}
    assert {r["setting"] for r in rows} == {"cross_sectional", "longitudinal"}
    for r in rows:
        assert 0.0 <= float(r["accuracy"]) <= 1.0


def test_train_rerun_reproduces_metrics(pipeline_dir, tmp_path):
    root, config_path, out = pipeline_dir
    runner = CliRunner()
    out2 = tmp_path / "out2"
    for command in ("generate", "train"):
        result = runner.invoke(main, [command, "--config", str(config_path),
                                      "--out", str(out2)])
        assert result.exit_code == 0

    def stripped(path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        drop = rows[0].index("wall_seconds")
        return [[c for i, c in enumerate(row) if i != drop] for row in rows]

    assert stripped(out / "train" / "metrics.csv") \
        == stripped(out2 / "train" / "metrics.csv")
    assert (out / "dataset" / "manifest.jsonl").read_bytes() \
        == (out2 / "dataset" / "manifest.jsonl").read_bytes()


def test_missing_upstream_artifact_exits_2(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(MICRO_CONFIG))
    runner = CliRunner()
    result = runner.invoke(main, ["analyze", "--config", str(config_path),
                                  "--out", str(tmp_path / "empty")])
    assert result.exit_code == 2
    assert "missing upstream artifact" in result.output


def test_train_without_dataset_exits_2(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(MICRO_CONFIG))
    runner = CliRunner()
    result = runner.invoke(main, ["train", "--config", str(config_path),
                                  "--out", str(tmp_path / "nothing")])
    assert result.exit_code == 2


def test_invalid_config_exits_1(tmp_path):
    config_path = tmp_path / "bad.json"
    config_path.write_text(json.dumps({"synthgen": {"bogus": 1}}))
    runner = CliRunner()
    result = runner.invoke(main, ["generate", "--config", str(config_path),
                                  "--out", str(tmp_path / "out")])
    assert result.exit_code == 1
    assert "unknown key" in result.output


def test_env_seed_override(tmp_path, monkeypatch):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(MICRO_CONFIG))
    monkeypatch.setenv("LSSL_SEED", "123")
    runner = CliRunner()
    out = tmp_path / "out"
    result = runner.invoke(main, ["generate", "--config", str(config_path),
                                  "--out", str(out)])
    assert result.exit_code == 0
    meta = json.loads((out / "dataset" / "run_meta.json").read_text())
    assert meta["seed"] == 123
