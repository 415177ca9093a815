"""End-to-end command-line behavior: artifacts on disk, output formats,
config-file merging, environment resolution, and exit codes."""

import csv
import io
import json

import numpy as np
import pytest

from nutrivision.cli import (
    CHECKPOINT_NAME,
    CONFIG_NAME,
    DATA_DIR_ENV,
    HISTORY_NAME,
    REPORT_NAME,
    main,
)
from nutrivision.dataio import TASKS, TASK_UNITS
from nutrivision.evaluation import TABLE_COLUMNS

def train_args(**overrides):
    """Fast-run training flags; override by underscore name, None drops one."""
    opts = {
        "--backbone": "tiny", "--head": "compressed",
        "--feature-dim": "8", "--shared-widths": "16", "--resolution": "16",
        "--learning-rate": "0.01", "--batch-size": "4", "--max-epochs": "2",
        "--early-stop-patience": "0", "--seed": "0",
    }
    for key, value in overrides.items():
        flag = "--" + key.replace("_", "-")
        if value is None:
            opts.pop(flag, None)
        else:
            opts[flag] = str(value)
    return [part for flag, value in opts.items() for part in (flag, value)]


TRAIN_ARGS = train_args()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-data")
    assert main(["synth", "--out", str(out), "--count", "12",
                 "--resolution", "16", "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def manifest_path(data_dir):
    return data_dir / "manifest.csv"


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, manifest_path):
    out = tmp_path_factory.mktemp("cli-run")
    code = main(["train", "--manifest", str(manifest_path), *TRAIN_ARGS,
                 "--out", str(out)])
    assert code == 0
    return out


class TestSynth:
    def test_writes_dataset(self, data_dir, capsys):
        assert (data_dir / "manifest.csv").exists()
        assert (data_dir / "synth_spec.json").exists()
        assert len(list(data_dir.glob("*.png"))) == 12

    def test_reports_what_it_wrote(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "d"), "--count", "2",
                     "--resolution", "8"]) == 0
        out = capsys.readouterr().out
        assert "wrote 2 images" in out

    def test_bad_count_is_a_config_error(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "d"), "--count", "0"]) == 1
        assert capsys.readouterr().err.startswith("error: config:")


class TestTrain:
    def test_artifacts_written(self, run_dir):
        for name in (CONFIG_NAME, HISTORY_NAME, CHECKPOINT_NAME, REPORT_NAME):
            assert (run_dir / name).exists(), name

    def test_config_echo_line_shows_every_setting(self, manifest_path, tmp_path, capsys):
        assert main(["train", "--manifest", str(manifest_path), *TRAIN_ARGS,
                     "--max-epochs", "0", "--out", str(tmp_path / "run")]) == 0
        first_line = capsys.readouterr().out.splitlines()[0]
        assert first_line.startswith("config: ")
        echo = json.loads(first_line[len("config: "):])
        assert echo["train"]["learning_rate"] == 0.01
        assert echo["train"]["momentum"] == 0.9  # default, but still echoed
        assert echo["model"]["backbone"]["kind"] == "tiny_test"
        assert echo["model"]["head"]["shared_widths"] == [16]
        assert echo["split_fractions"] == [0.70, 0.15, 0.15]
        assert echo["split_seed"] == 0
        assert echo["label"] == "tiny/compressed"
        saved = json.loads((tmp_path / "run" / CONFIG_NAME).read_text())
        assert saved == echo

    def test_history_has_one_line_per_epoch(self, run_dir):
        lines = (run_dir / HISTORY_NAME).read_text().splitlines()
        assert [json.loads(l)["epoch"] for l in lines] == [1, 2]
        record = json.loads(lines[0])
        assert set(record) == {"epoch", "train_mae", "val_mae", "val_combined_mae", "seconds"}

    def test_report_is_the_best_models_val_score(self, run_dir):
        report = json.loads((run_dir / REPORT_NAME).read_text())
        history = [json.loads(l) for l in (run_dir / HISTORY_NAME).read_text().splitlines()]
        best = min(h["val_combined_mae"] for h in history)
        assert report["combined_mae"] == pytest.approx(best, rel=1e-12)
        assert report["model_label"] == "tiny/compressed"

    def test_summary_line(self, manifest_path, tmp_path, capsys):
        assert main(["train", "--manifest", str(manifest_path), *TRAIN_ARGS,
                     "--max-epochs", "1", "--out", str(tmp_path / "run")]) == 0
        out = capsys.readouterr().out
        assert "trained 1 epoch(s)" in out
        assert "best epoch 1" in out

    def test_custom_label_threads_to_report(self, manifest_path, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--manifest", str(manifest_path), *TRAIN_ARGS,
                     "--max-epochs", "1", "--label", "pilot", "--out", str(out)]) == 0
        assert json.loads((out / REPORT_NAME).read_text())["model_label"] == "pilot"


class TestEvaluate:
    def test_text_table_to_stdout(self, run_dir, manifest_path, capsys):
        assert main(["evaluate", "--checkpoint", str(run_dir / CHECKPOINT_NAME),
                     "--manifest", str(manifest_path)]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0].startswith("Model")
        assert "tiny/compressed" in out

    def test_csv_to_file(self, run_dir, manifest_path, tmp_path):
        target = tmp_path / "table.csv"
        assert main(["evaluate", "--checkpoint", str(run_dir / CHECKPOINT_NAME),
                     "--manifest", str(manifest_path), "--format", "csv",
                     "--out", str(target)]) == 0
        rows = list(csv.reader(io.StringIO(target.read_text())))
        assert rows[0] == ["Model"] + list(TABLE_COLUMNS)
        values = [float(v) for v in rows[1][1:]]
        assert values[-1] == pytest.approx(sum(values[:-1]), rel=1e-9)

    def test_json_format(self, run_dir, manifest_path, capsys):
        assert main(["evaluate", "--checkpoint", str(run_dir / CHECKPOINT_NAME),
                     "--manifest", str(manifest_path), "--format", "json"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert list(report["per_task_mae"]) == list(TASKS)
        assert report["sample_count"] == 2  # test split of 12 at default fractions

    def test_val_split_reproduces_training_report(self, run_dir, manifest_path, capsys):
        # The checkpoint remembers split fractions and seed, so evaluating
        # the val split must reproduce report.json exactly.
        assert main(["evaluate", "--checkpoint", str(run_dir / CHECKPOINT_NAME),
                     "--manifest", str(manifest_path), "--split", "val",
                     "--batch-size", "4", "--format", "json"]) == 0
        got = json.loads(capsys.readouterr().out)
        saved = json.loads((run_dir / REPORT_NAME).read_text())
        assert got == saved

    def test_split_all_uses_every_sample(self, run_dir, manifest_path, capsys):
        assert main(["evaluate", "--checkpoint", str(run_dir / CHECKPOINT_NAME),
                     "--manifest", str(manifest_path), "--split", "all",
                     "--format", "json"]) == 0
        assert json.loads(capsys.readouterr().out)["sample_count"] == 12


class TestPredict:
    def test_prints_five_labeled_lines(self, run_dir, data_dir, capsys):
        assert main(["predict", "--checkpoint", str(run_dir / CHECKPOINT_NAME),
                     "--image", str(data_dir / "synth_0000.png")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 5
        for line, task, unit in zip(lines, TASKS, TASK_UNITS):
            name, rest = line.split(": ")
            value, got_unit = rest.rsplit(" ", 1)
            assert name == task
            assert got_unit == unit
            float(value)  # must parse

    def test_is_deterministic(self, run_dir, data_dir, capsys):
        args = ["predict", "--checkpoint", str(run_dir / CHECKPOINT_NAME),
                "--image", str(data_dir / "synth_0003.png")]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        assert capsys.readouterr().out == first


class TestInspect:
    def test_json_summary(self, run_dir, capsys):
        assert main(["inspect", "--checkpoint", str(run_dir / CHECKPOINT_NAME)]) == 0
        info = json.loads(capsys.readouterr().out)
        counts = info["parameter_count"]
        assert counts["all"] == counts["head_only"] + counts["backbone_only"]
        assert info["model_config"]["backbone"]["kind"] == "tiny_test"
        assert info["extras"]["label"] == "tiny/compressed"
        assert info["epoch"] >= 1


class TestConfigFile:
    def test_file_value_applies_when_flag_absent(self, manifest_path, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"learning_rate": 0.5, "max-epochs": 0}))
        assert main(["train", "--manifest", str(manifest_path),
                     *train_args(learning_rate=None, max_epochs=None),
                     "--out", str(tmp_path / "run"), "--config", str(cfg)]) == 0
        echo = json.loads(capsys.readouterr().out.splitlines()[0][len("config: "):])
        assert echo["train"]["learning_rate"] == 0.5
        assert echo["train"]["max_epochs"] == 0

    def test_explicit_flag_beats_file(self, manifest_path, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"learning_rate": 0.5}))
        assert main(["train", "--manifest", str(manifest_path), *TRAIN_ARGS,
                     "--max-epochs", "0", "--out", str(tmp_path / "run"),
                     "--config", str(cfg)]) == 0
        echo = json.loads(capsys.readouterr().out.splitlines()[0][len("config: "):])
        assert echo["train"]["learning_rate"] == 0.01

    def test_list_values_work(self, manifest_path, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"shared_widths": [24], "max_epochs": 0}))
        assert main(["train", "--manifest", str(manifest_path),
                     *train_args(shared_widths=None),
                     "--out", str(tmp_path / "run"), "--config", str(cfg)]) == 0
        echo = json.loads(capsys.readouterr().out.splitlines()[0][len("config: "):])
        assert echo["model"]["head"]["shared_widths"] == [24]

    def test_unknown_key_rejected(self, manifest_path, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"optimizer": "sgd"}))
        assert main(["train", "--manifest", str(manifest_path), *TRAIN_ARGS,
                     "--out", str(tmp_path / "run"), "--config", str(cfg)]) == 1
        assert "optimizer" in capsys.readouterr().err

    def test_invalid_json_rejected(self, manifest_path, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        assert main(["train", "--manifest", str(manifest_path), *TRAIN_ARGS,
                     "--out", str(tmp_path / "run"), "--config", str(cfg)]) == 1
        assert capsys.readouterr().err.startswith("error: config:")

    def test_missing_file_is_a_data_error(self, manifest_path, tmp_path, capsys):
        assert main(["train", "--manifest", str(manifest_path), *TRAIN_ARGS,
                     "--out", str(tmp_path / "run"),
                     "--config", str(tmp_path / "absent.json")]) == 2
        assert capsys.readouterr().err.startswith("error: data:")


class TestDataDirEnv:
    def test_relative_manifest_resolves(self, data_dir, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(DATA_DIR_ENV, str(data_dir))
        assert main(["train", "--manifest", "manifest.csv", *TRAIN_ARGS,
                     "--max-epochs", "0", "--out", str(tmp_path / "run")]) == 0

    def test_relative_image_resolves(self, run_dir, data_dir, monkeypatch, capsys):
        monkeypatch.setenv(DATA_DIR_ENV, str(data_dir))
        assert main(["predict", "--checkpoint", str(run_dir / CHECKPOINT_NAME),
                     "--image", "synth_0001.png"]) == 0

    def test_absolute_paths_ignore_the_variable(self, run_dir, data_dir, monkeypatch, capsys):
        monkeypatch.setenv(DATA_DIR_ENV, "/nonexistent")
        assert main(["predict", "--checkpoint", str(run_dir / CHECKPOINT_NAME),
                     "--image", str(data_dir / "synth_0001.png")]) == 0


class TestExitCodes:
    def test_missing_required_flag_is_usage(self, capsys):
        assert main(["train"]) == 1
        err = capsys.readouterr().err
        assert "usage" in err
        assert "error: config:" in err

    def test_unknown_command_is_usage(self, capsys):
        assert main(["serve"]) == 1

    def test_missing_manifest_is_data(self, tmp_path, capsys):
        assert main(["train", "--manifest", str(tmp_path / "nope.csv"), *TRAIN_ARGS,
                     "--out", str(tmp_path / "run")]) == 2
        assert capsys.readouterr().err.startswith("error: data:")

    def test_missing_checkpoint_is_data(self, manifest_path, tmp_path, capsys):
        assert main(["evaluate", "--checkpoint", str(tmp_path / "nope.npz"),
                     "--manifest", str(manifest_path)]) == 2

    def test_missing_image_is_data(self, run_dir, tmp_path, capsys):
        assert main(["predict", "--checkpoint", str(run_dir / CHECKPOINT_NAME),
                     "--image", str(tmp_path / "nope.png")]) == 2

    def test_invalid_hyperparameter_is_config(self, manifest_path, tmp_path, capsys):
        assert main(["train", "--manifest", str(manifest_path),
                     *train_args(learning_rate="-1"),
                     "--out", str(tmp_path / "run")]) == 1
        assert "learning_rate" in capsys.readouterr().err

    def test_transformer_flag_on_tiny_is_config(self, manifest_path, tmp_path, capsys):
        assert main(["train", "--manifest", str(manifest_path), *TRAIN_ARGS,
                     "--attention-heads", "4", "--out", str(tmp_path / "run")]) == 1
        assert "--attention-heads" in capsys.readouterr().err

    def test_divergence_is_exit_three(self, manifest_path, tmp_path, capsys):
        assert main(["train", "--manifest", str(manifest_path),
                     *train_args(learning_rate="1e200", max_epochs="1"),
                     "--out", str(tmp_path / "run")]) == 3
        err = capsys.readouterr().err
        assert err.startswith("error: divergence:")
        assert "epoch 1" in err

    def test_bad_split_fractions_is_config(self, manifest_path, tmp_path, capsys):
        assert main(["train", "--manifest", str(manifest_path), *TRAIN_ARGS,
                     "--split-fractions", "0.9,0.9,0.9",
                     "--out", str(tmp_path / "run")]) == 1
