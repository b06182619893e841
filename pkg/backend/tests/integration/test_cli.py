# backend/tests/integration/test_cli.py
# End-to-end runs of the command-line subcommands on a small synthetic dataset

import os

import numpy as np
import pytest
from cli import cli_dispatch
from clip_io import read_pgm, save_clip
from config import config
from dataset import MANIFEST_NAME, SYNTH_CLASSES
from model_store import build_model, load_model, save_model
from models import ModelConfig

pytestmark = pytest.mark.integration

TINY_TRAIN_FLAGS = [
    "--height", "16",
    "--width", "16",
    "--sequence-length", "4",
    "--attention-hidden", "4",
    "--gru-hidden", "4",
    "--gru-layers", "1",
    "--batch-size", "4",
    "--seed", "2",
    "--quiet",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic dataset plus a model trained on it for one epoch"""
    root = tmp_path_factory.mktemp("cli")
    data_dir = str(root / "data")
    code = cli_dispatch([
        "synth-data", "--out", data_dir, "--classes", "2",
        "--clips-per-class", "3", "--frames", "8", "--size", "16", "--seed", "1",
    ])
    assert code == 0

    model_path = str(root / "model.damb")
    history_path = str(root / "history.csv")
    code = cli_dispatch([
        "train", "--manifest", os.path.join(data_dir, MANIFEST_NAME),
        "--out", model_path, "--epochs", "1", "--history", history_path,
        *TINY_TRAIN_FLAGS,
    ])
    assert code == 0
    return {
        "root": root,
        "manifest": os.path.join(data_dir, MANIFEST_NAME),
        "clip": os.path.join(data_dir, "clips", f"{SYNTH_CLASSES[0]}_000.dacl"),
        "model": model_path,
        "history": history_path,
    }


class TestSynthData:
    def test_writes_manifest_and_clips(self, workspace):
        data_dir = os.path.dirname(workspace["manifest"])
        assert os.path.exists(workspace["manifest"])
        assert len(os.listdir(os.path.join(data_dir, "clips"))) == 6

    def test_reports_what_it_wrote(self, tmp_path, capsys):
        code = cli_dispatch([
            "synth-data", "--out", str(tmp_path), "--classes", "2",
            "--clips-per-class", "2", "--frames", "4", "--size", "8",
        ])
        assert code == 0
        assert capsys.readouterr().out.startswith("wrote 4 clips")


class TestTrain:
    def test_model_file_matches_flags(self, workspace):
        bundle = load_model(workspace["model"])

        assert bundle.labels == list(SYNTH_CLASSES[:2])
        assert bundle.config.backbone.input_height == 16
        assert bundle.config.recurrent.sequence_length == 4
        assert bundle.config.recurrent.num_layers == 1

    def test_history_csv(self, workspace):
        with open(workspace["history"]) as file:
            lines = file.read().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,val_acc"
        assert len(lines) == 2

    def test_config_file_is_overridden_by_flags(self, workspace, tmp_path, capsys):
        settings = tmp_path / "run.conf"
        settings.write_text("epochs = 3\nlearning-rate = 0.01\n")
        history = tmp_path / "history.csv"

        code = cli_dispatch([
            "train", "--manifest", workspace["manifest"],
            "--out", str(tmp_path / "m.damb"), "--config", str(settings),
            "--epochs", "2", "--history", str(history), *TINY_TRAIN_FLAGS,
        ])

        assert code == 0
        assert len(history.read_text().splitlines()) == 3
        assert "best val_acc" in capsys.readouterr().out

    def test_prints_model_summary_unless_quiet(self, workspace, tmp_path, capsys):
        flags = [f for f in TINY_TRAIN_FLAGS if f != "--quiet"]
        code = cli_dispatch([
            "train", "--manifest", workspace["manifest"],
            "--out", str(tmp_path / "m.damb"), "--epochs", "1", *flags,
        ])

        out = capsys.readouterr().out
        assert code == 0
        assert "total parameters:" in out
        assert "epoch 1/1" in out


class TestInference:
    def test_eval_prints_accuracy_and_confusion(self, workspace, capsys):
        code = cli_dispatch([
            "eval", "--model", workspace["model"],
            "--manifest", workspace["manifest"], "--split", "all",
        ])

        lines = capsys.readouterr().out.splitlines()
        assert code == 0
        assert lines[0].startswith("accuracy: ")
        assert "(12 windows)" in lines[0]
        assert len(lines) == 2 + 2

    def test_predict_lists_every_class(self, workspace, capsys):
        code = cli_dispatch(["predict", "--model", workspace["model"], workspace["clip"]])

        lines = capsys.readouterr().out.splitlines()
        assert code == 0
        probabilities = [float(line.split("\t")[1]) for line in lines[:-1]]
        assert len(probabilities) == 2
        assert sum(probabilities) == pytest.approx(1.0, abs=1e-5)
        assert probabilities == sorted(probabilities, reverse=True)
        assert lines[-1].startswith("predicted: ")

    def test_saliency_pyramid_on_default_model(self, tmp_path, rng, capsys):
        model = str(tmp_path / "default.damb")
        save_model(build_model(ModelConfig(), ["a", "b"], seed=0), model)
        clip = str(tmp_path / "walk.dacl")
        save_clip(rng.integers(0, 256, size=(3, 64, 64, 3), dtype=np.uint8), clip)

        code = cli_dispatch([
            "saliency", "--model", model, clip, "--frame", "2", "--out-dir", str(tmp_path),
        ])

        assert code == 0
        shapes = [
            read_pgm(str(tmp_path / f"walk_f2_block{n}.pgm")).shape for n in range(1, 5)
        ]
        assert shapes == [(32, 32), (16, 16), (8, 8), (4, 4)]
        assert len(capsys.readouterr().out.splitlines()) == 4


class TestBench:
    def test_prints_record_line(self, capsys):
        code = cli_dispatch([
            "bench", "--height", "16", "--width", "16", "--warmup", "1", "--timed", "4",
            "--threads", "1",
        ])

        out = capsys.readouterr().out
        assert code == 0
        assert "Seconds per frame" in out
        records = [line for line in out.splitlines() if line.startswith("spf=")]
        assert len(records) == 1
        assert records[0].endswith("warmup=1 timed=4 threads=1")

    def test_threads_add_a_report(self, capsys):
        code = cli_dispatch([
            "bench", "--height", "16", "--width", "16", "--warmup", "0",
            "--timed", "4", "--threads", "2",
        ])

        records = [
            line for line in capsys.readouterr().out.splitlines() if line.startswith("spf=")
        ]
        assert code == 0
        assert [r.rsplit("=", 1)[1] for r in records] == ["1", "2"]

    def test_thread_count_defaults_to_config(self, mocker, capsys):
        mocker.patch.object(config, "THREADS", 2)

        code = cli_dispatch([
            "bench", "--height", "16", "--width", "16", "--warmup", "0", "--timed", "2",
        ])

        records = [
            line for line in capsys.readouterr().out.splitlines() if line.startswith("spf=")
        ]
        assert code == 0
        assert [r.rsplit("=", 1)[1] for r in records] == ["1", "2"]


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert cli_dispatch(["dance"]) == 2

    def test_missing_required_flag(self, capsys):
        assert cli_dispatch(["predict", "clip.dacl"]) == 2

    def test_missing_model_file(self, tmp_path, capsys):
        code = cli_dispatch(["predict", "--model", str(tmp_path / "none.damb"), "c.dacl"])

        err = capsys.readouterr().err
        assert code == 1
        assert err.startswith("error: ")
        assert len(err.strip().splitlines()) == 1

    def test_help_exits_cleanly(self, capsys):
        assert cli_dispatch(["--help"]) == 0
        assert "synth-data" in capsys.readouterr().out
