import numpy as np
import pytest

from backend.checkpoint import load_checkpoint
from backend.config_helper import load_run_config
from main import main

from conftest import SMOKE_CONFIG


def data_flags(root):
    return ["--data.frames_root", str(root / "frames"), "--data.annotations_root", str(root / "annotations")]


@pytest.fixture(scope="module")
def trained(synth_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--config", str(SMOKE_CONFIG), "--out", str(out), *data_flags(synth_corpus),
                 "--iterations", "3", "--train.checkpoint_every", "2", "--train.clips_per_batch", "1"])
    assert code == 0
    return out


def test_synth_writes_a_corpus(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--videos", "2", "--frames", "40", "--size", "16"]) == 0
    assert len(list((tmp_path / "annotations").glob("*.txt"))) == 2
    assert len(list((tmp_path / "frames" / "video_001").glob("*.png"))) == 40


def test_train_writes_checkpoints_and_config(trained):
    assert sorted(p.name for p in trained.glob("*.ckpt")) == ["checkpoint_00000002.ckpt",
                                                              "checkpoint_00000003.ckpt"]
    config = load_run_config(trained / "run.conf")
    assert config.train.max_iterations == 3
    assert (trained / "train.log").read_text().count("iter=") == 3


def test_eval_prints_a_report(trained, capsys):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint_00000003.ckpt"),
                 "--config", str(trained / "run.conf")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("acc=")
    assert lines[4] == "frames_evaluated=256"


def test_predict_then_metrics_matches_eval(trained, synth_corpus, tmp_path, capsys):
    checkpoint = str(trained / "checkpoint_00000003.ckpt")
    config = str(trained / "run.conf")
    assert main(["eval", "--checkpoint", checkpoint, "--config", config]) == 0
    direct = capsys.readouterr().out
    predictions = tmp_path / "predictions.txt"
    assert main(["predict", "--checkpoint", checkpoint, "--config", config, "--out", str(predictions)]) == 0
    assert len(predictions.read_text().splitlines()) == 256
    capsys.readouterr()
    assert main(["metrics", "--predictions", str(predictions),
                 "--annotations", str(synth_corpus / "annotations")]) == 0
    assert capsys.readouterr().out == direct


def test_eval_over_a_directory_names_the_best_checkpoint(trained, capsys):
    assert main(["eval", "--checkpoint", str(trained), "--config", str(trained / "run.conf")]) == 0
    out = capsys.readouterr().out
    assert "[checkpoint_00000002.ckpt]" in out and "[checkpoint_00000003.ckpt]" in out
    best = out.strip().splitlines()[-1]
    assert best.startswith("best=") and best.endswith(".ckpt")


def test_zero_learning_rate_keeps_initial_parameters(synth_corpus, tmp_path):
    out = tmp_path / "frozen"
    assert main(["train", "--config", str(SMOKE_CONFIG), "--out", str(out), *data_flags(synth_corpus),
                 "--lr", "0", "--iterations", "2", "--train.clips_per_batch", "1"]) == 0
    initial = load_run_config(out / "run.conf").build_model().params().parameters
    saved = load_checkpoint(out / "checkpoint_00000002.ckpt").parameters
    assert saved.keys() == initial.keys()
    assert all(np.array_equal(saved[k], initial[k]) for k in saved)


def test_architecture_mismatch_is_rejected(trained, capsys):
    code = main(["eval", "--checkpoint", str(trained / "checkpoint_00000003.ckpt"),
                 "--config", str(trained / "run.conf"), "--sequence.hidden_size", "8"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


@pytest.mark.parametrize("argv, code", [
    ([], 1),
    (["dance"], 1),
    (["metrics", "--predictions", "p.txt"], 1),
    (["metrics", "--predictions", "p.txt", "--annotations", "nowhere", "--lr", "1"], 1),
    (["train", "--config", str(SMOKE_CONFIG), "--backbone.depth", "3"], 1),
])
def test_usage_errors(argv, code, capsys):
    assert main(argv) == code
    assert "error:" in capsys.readouterr().err


def test_data_contract_errors_exit_with_two(synth_corpus, tmp_path, capsys):
    predictions = tmp_path / "p.txt"
    predictions.write_text("video_000 0 1\n")
    assert main(["metrics", "--predictions", str(predictions), "--annotations", str(tmp_path / "nowhere")]) == 2
    corrupt = tmp_path / "bad.ckpt"
    corrupt.write_bytes(b"CLPNET\0" + b"\1")
    assert main(["eval", "--checkpoint", str(corrupt), "--config", str(SMOKE_CONFIG),
                 *data_flags(synth_corpus)]) == 2
    err = capsys.readouterr().err.splitlines()
    assert sum(line.startswith("error:") for line in err) == 2
