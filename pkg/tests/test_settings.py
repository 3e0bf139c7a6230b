import pytest

from dastgah.dsp import FeatureKind
from dastgah.settings import ConfigError, config_keys, load_config, thread_count


def test_defaults() -> None:
    cfg = load_config()
    assert cfg.feature is FeatureKind.MFCC
    assert cfg.segment_seconds == 20.0
    assert (cfg.stft.frame_length, cfg.stft.hop_length, cfg.stft.window) == (2048, 1536, "hann")
    assert cfg.model.encoder_widths == (128, 64, 32)
    assert cfg.model.decoder_widths == (32, 64, 128)
    assert cfg.model.input_dims == 24
    assert cfg.train.learning_rate == pytest.approx(0.001)
    assert cfg.train.plateau_factor == pytest.approx(0.7)
    assert cfg.train.plateau_patience == 7
    assert cfg.split.mode == "record"


def test_file_then_overrides(tmp_path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("feature=mel\nhop_length=1024\nencoder_widths=16,8\nmax_epochs=3\nstandardize=yes\n")
    cfg = load_config(path, {"max_epochs": 5, "seed": None})
    assert cfg.feature is FeatureKind.MEL
    assert cfg.model.input_dims == 128
    assert cfg.stft.hop_length == 1024
    assert cfg.model.encoder_widths == (16, 8)
    assert cfg.train.max_epochs == 5
    assert cfg.train.seed == 0
    assert cfg.train.standardize is True


def test_unknown_key_is_named(tmp_path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("learning_rte=0.01\n")
    with pytest.raises(ConfigError, match="learning_rte"):
        load_config(path)


def test_unparsable_and_invalid_values(tmp_path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("batch_size=many\n")
    with pytest.raises(ConfigError, match="batch_size"):
        load_config(path)
    path.write_text("decoder_widths=32,48\n")
    with pytest.raises(ConfigError, match="double"):
        load_config(path)
    path.write_text("frame_length=1000\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config_file(tmp_path) -> None:
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.cfg")


def test_config_keys_are_sorted_pairs() -> None:
    keys = [k for k, _ in config_keys()]
    assert keys == sorted(keys)
    assert "plateau_patience" in keys


def test_thread_count(monkeypatch) -> None:
    monkeypatch.setenv("NAVA_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("NAVA_THREADS", "zero")
    with pytest.raises(ConfigError):
        thread_count()
    monkeypatch.delenv("NAVA_THREADS")
    assert thread_count() >= 1
