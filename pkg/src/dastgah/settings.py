from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from .dataset import SEGMENT_SECONDS, SplitSpec
from .dsp import FeatureKind, StftConfig
from .model import BiLGNetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    segment_seconds: float
    feature: FeatureKind
    stft: StftConfig
    model: BiLGNetConfig
    train: TrainConfig
    split: SplitSpec

    def to_dict(self) -> dict:
        return {
            "segment_seconds": self.segment_seconds,
            "feature": self.feature.value,
            "frame_length": self.stft.frame_length,
            "hop_length": self.stft.hop_length,
            "window": self.stft.window,
            "split_mode": self.split.mode,
            "train_fraction": self.split.train,
            "val_fraction": self.split.val,
            "test_fraction": self.split.test,
            "seed": self.train.seed,
        }


# Every accepted key with its default, in the config file's own text form.
_DEFAULTS: Dict[str, str] = {
    "segment_seconds": str(SEGMENT_SECONDS),
    "feature": "mfcc",
    "frame_length": "2048",
    "hop_length": "1536",
    "window": "hann",
    "encoder_widths": "128,64,32",
    "latent_width": "16",
    "decoder_widths": "32,64,128",
    "bottleneck_width": "16",
    "dropout_rate": "0.5",
    "learning_rate": "0.001",
    "beta1": "0.9",
    "beta2": "0.999",
    "epsilon": "1e-8",
    "batch_size": "32",
    "max_epochs": "100",
    "plateau_factor": "0.7",
    "plateau_patience": "7",
    "plateau_min_delta": "0.001",
    "seed": "0",
    "standardize": "false",
    "split_mode": "record",
    "train_fraction": "0.9",
    "val_fraction": "0.05",
    "test_fraction": "0.05",
}


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _int_list(raw: str) -> Tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError(raw)
    return tuple(int(p) for p in parts)


def _feature(raw: str) -> FeatureKind:
    return FeatureKind.parse(raw)


_INT_KEYS = {"frame_length", "hop_length", "latent_width", "bottleneck_width", "batch_size", "max_epochs", "plateau_patience", "seed"}
_LIST_KEYS = {"encoder_widths", "decoder_widths"}
_STR_KEYS = {"window", "split_mode"}


def _parser(key: str) -> Callable[[str], Any]:
    if key in _INT_KEYS:
        return int
    if key in _LIST_KEYS:
        return _int_list
    if key in _STR_KEYS:
        return lambda s: s.strip().lower()
    if key == "standardize":
        return _bool
    if key == "feature":
        return _feature
    return float


def _as_text(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, FeatureKind):
        return value.value
    return str(value)


def config_keys() -> List[Tuple[str, str]]:
    return sorted(_DEFAULTS.items())


def load_environment(project_root: str | None = None) -> None:
    root = Path(project_root or os.getcwd())
    env_path = root / ".env"
    if env_path.exists():
        load_dotenv(env_path)
    else:
        load_dotenv()


def thread_count() -> int:
    raw = os.getenv("NAVA_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NAVA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"NAVA_THREADS must be >= 1, got {n}")
    return n


def debug_enabled() -> bool:
    return os.getenv("DEBUG", "0") in ("1", "true", "True")


def load_config(path: str | Path | None = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the key=value file at `path`, then non-None `overrides` (command-line flags)."""
    raw = dict(_DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"{p}: config file not found")
        for key, value in dotenv_values(p).items():
            k = key.strip().lower()
            if k not in _DEFAULTS:
                raise ConfigError(f"{p}: unknown config key {key!r}")
            if value is None or not value.strip():
                raise ConfigError(f"{p}: config key {key!r} has no value")
            raw[k] = value
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        raw[key] = _as_text(value)

    values: Dict[str, Any] = {}
    for key, text in raw.items():
        try:
            values[key] = _parser(key)(text)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {text!r}") from None

    try:
        feature: FeatureKind = values["feature"]
        if values["segment_seconds"] <= 0:
            raise ValueError(f"segment_seconds must be positive, got {values['segment_seconds']}")
        stft = StftConfig(values["frame_length"], values["hop_length"], values["window"])
        model = BiLGNetConfig(
            input_dims=feature.dims,
            encoder_widths=values["encoder_widths"],
            latent_width=values["latent_width"],
            decoder_widths=values["decoder_widths"],
            bottleneck_width=values["bottleneck_width"],
            dropout_rate=values["dropout_rate"],
        )
        train = TrainConfig(
            learning_rate=values["learning_rate"],
            beta1=values["beta1"],
            beta2=values["beta2"],
            epsilon=values["epsilon"],
            batch_size=values["batch_size"],
            max_epochs=values["max_epochs"],
            plateau_factor=values["plateau_factor"],
            plateau_patience=values["plateau_patience"],
            plateau_min_delta=values["plateau_min_delta"],
            seed=values["seed"],
            dropout_rate=values["dropout_rate"],
            standardize=values["standardize"],
        )
        split = SplitSpec(
            train=values["train_fraction"],
            val=values["val_fraction"],
            test=values["test_fraction"],
            seed=values["seed"],
            mode=values["split_mode"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(
        segment_seconds=values["segment_seconds"],
        feature=feature,
        stft=stft,
        model=model,
        train=train,
        split=split,
    )
