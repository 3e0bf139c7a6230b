import json
from pathlib import Path

import numpy as np
import pytest

from dastgah.audio_io import AudioClip, write_wav
from dastgah.cli import main

SMALL_RUN = """\
segment_seconds=2
encoder_widths=6,4
latent_width=2
decoder_widths=2,4
bottleneck_width=4
max_epochs=1
batch_size=8
"""


def test_missing_manifest_is_usage_error(tmp_path) -> None:
    assert main(["extract", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path / "f")]) == 2


def test_unknown_config_key_is_usage_error(tmp_path) -> None:
    manifest = tmp_path / "m.csv"
    manifest.write_text("record_id,path,dastgah,instrument,artist\n")
    cfg = tmp_path / "run.cfg"
    cfg.write_text("windowing=hann\n")
    code = main(["extract", "--manifest", str(manifest), "--out", str(tmp_path / "f"), "--config", str(cfg)])
    assert code == 2


def test_bad_arguments_exit_two() -> None:
    assert main(["extract"]) == 2
    assert main(["no-such-command"]) == 2


def test_manifest_summary(tmp_path, capsys) -> None:
    manifest = tmp_path / "m.csv"
    manifest.write_text("record_id,path,dastgah,instrument,artist\nr1,a.wav,Nava,Tar,X\nr2,b.wav,Nava,Setar,X\n")
    assert main(["manifest", "--manifest", str(manifest)]) == 0
    out = capsys.readouterr().out
    assert "Nava" in out
    assert "Total records: 2" in out


@pytest.fixture()
def small_run(tmp_path) -> Path:
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL_RUN)
    assert main(["synth", "--out", str(tmp_path / "data"), "--per-class", "3", "--seconds", "2", "--seed", "4"]) == 0
    code = main(
        [
            "extract",
            "--manifest",
            str(tmp_path / "data" / "manifest.csv"),
            "--out",
            str(tmp_path / "feat"),
            "--config",
            str(cfg),
        ]
    )
    assert code == 0
    return tmp_path


def test_synth_extract_train_evaluate_classify(small_run, capsys) -> None:
    root = small_run
    index = json.loads((root / "feat" / "index.json").read_text())
    assert len(index) == 21
    assert {i["rows"] for i in index} == {28}

    model = root / "model.navm"
    code = main(["train", "--features", str(root / "feat"), "--config", str(root / "run.cfg"), "--out", str(model)])
    assert code == 0
    assert model.is_file()
    epochs = (root / "model.epochs.jsonl").read_text().splitlines()
    assert len(epochs) == 1
    capsys.readouterr()

    assert main(["evaluate", "--model", str(model), "--features", str(root / "feat"), "--report", "json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert sum(c["support"] for c in rep["classes"]) == 7

    assert main(["evaluate", "--model", str(model), "--features", str(root / "feat"), "--split", "all", "--by-instrument"]) == 0
    out = capsys.readouterr().out
    assert "Total Accuracy" in out
    assert "Kamancheh" in out

    wav = root / "data" / "audio" / "synth-c2-000.wav"
    assert main(["classify", "--model", str(model), str(wav)]) == 0
    assert "verdict:" in capsys.readouterr().out


def test_resume_continues_epoch_count(small_run) -> None:
    root = small_run
    model = root / "model.navm"
    base = ["train", "--features", str(root / "feat"), "--config", str(root / "run.cfg"), "--out", str(model)]
    assert main(base) == 0
    assert main(base + ["--resume", str(model), "--epochs", "2"]) == 0
    assert len((root / "model.epochs.jsonl").read_text().splitlines()) == 2


def test_classify_short_file_fails(small_run, tmp_path) -> None:
    root = small_run
    model = root / "model.navm"
    assert main(["train", "--features", str(root / "feat"), "--config", str(root / "run.cfg"), "--out", str(model)]) == 0
    short = write_wav(tmp_path / "short.wav", AudioClip(np.zeros(22050), 22050))
    assert main(["classify", "--model", str(model), str(short)]) == 1


def test_gradcheck_command(capsys) -> None:
    assert main(["gradcheck", "--seed", "0"]) == 0
    assert "bilgnet" in capsys.readouterr().out
