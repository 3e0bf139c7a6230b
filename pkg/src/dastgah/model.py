from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Tuple

import numpy as np

from .layers import (
    GRU,
    LSTM,
    BatchNorm,
    Bidirectional,
    Dense,
    Dropout,
    Layer,
    ModeError,
    ShapeError,
)

log = logging.getLogger(__name__)

N_CLASSES = 7


@dataclass(frozen=True)
class BiLGNetConfig:
    input_dims: int = 24
    encoder_widths: Tuple[int, ...] = (128, 64, 32)
    latent_width: int = 16
    decoder_widths: Tuple[int, ...] = (32, 64, 128)
    bottleneck_width: int = 16
    dropout_rate: float = 0.5
    n_classes: int = N_CLASSES
    dtype: str = "float32"

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        widths = self.encoder_widths + (self.latent_width,) + self.decoder_widths + (self.bottleneck_width,)
        if self.input_dims < 1:
            raise ValueError(f"input_dims must be positive, got {self.input_dims}")
        if not self.encoder_widths or not self.decoder_widths:
            raise ValueError("encoder and decoder need at least one layer each")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        for a, b in zip(self.decoder_widths, self.decoder_widths[1:]):
            if b != 2 * a:
                raise ValueError(f"decoder widths must double layer to layer, got {self.decoder_widths}")
        if self.n_classes != N_CLASSES:
            raise ValueError(f"output classes must be {N_CLASSES}, got {self.n_classes}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "BiLGNetConfig":
        return cls(**{**raw, "encoder_widths": tuple(raw["encoder_widths"]), "decoder_widths": tuple(raw["decoder_widths"])})


def recurrent_param_count(kind: str, input_dim: int, hidden: int) -> int:
    """Closed-form parameter count of one bidirectional recurrent layer."""
    gates = {"lstm": 4, "gru": 3}[kind]
    return 2 * gates * (hidden * (hidden + input_dim) + hidden)


def expected_param_count(cfg: BiLGNetConfig) -> int:
    total = 0
    dim = cfg.input_dims
    for w in cfg.encoder_widths:
        total += recurrent_param_count("lstm", dim, w) + 2 * (2 * w)
        dim = 2 * w
    total += recurrent_param_count("gru", dim, cfg.latent_width)
    dim = 2 * cfg.latent_width
    for w in cfg.decoder_widths:
        total += recurrent_param_count("gru", dim, w) + 2 * (2 * w)
        dim = 2 * w
    total += dim * cfg.bottleneck_width + cfg.bottleneck_width
    total += cfg.bottleneck_width * cfg.n_classes + cfg.n_classes
    return total


class BiLGNet:
    """Bidirectional LSTM encoder, bidirectional GRU latent and decoder, dense bottleneck, softmax head."""

    def __init__(self, cfg: BiLGNetConfig, layers: List[Tuple[str, Layer]]) -> None:
        self.cfg = cfg
        self.layers = layers
        self._last_forward_train = False

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.cfg.dtype)

    def layer(self, name: str) -> Layer:
        for n, l in self.layers:
            if n == name:
                return l
        raise KeyError(name)

    def named_parameters(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name, layer in self.layers:
            for k, v in layer.params.items():
                out[f"{name}.{k}"] = v
        return out

    def named_gradients(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name, layer in self.layers:
            for k, v in layer.grads.items():
                out[f"{name}.{k}"] = v
        return out

    def named_buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name, layer in self.layers:
            for k, v in layer.buffers().items():
                out[f"{name}.{k}"] = v
        return out

    def batchnorm_layers(self) -> List[Tuple[str, BatchNorm]]:
        return [(n, l) for n, l in self.layers if isinstance(l, BatchNorm)]

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.named_parameters().values()))

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        for _, layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = rng

    def set_dropout_rate(self, rate: float) -> None:
        self.cfg = replace(self.cfg, dropout_rate=float(rate))
        for _, layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rate = self.cfg.dropout_rate

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Class probabilities, batch x n_classes."""
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[2] != self.cfg.input_dims:
            raise ShapeError(f"model expects batch x time x {self.cfg.input_dims}, got shape {x.shape}")
        y = x.astype(self.dtype, copy=False)
        for _, layer in self.layers:
            y = layer.forward(y, train)
        self._last_forward_train = train
        return y

    def predict_proba(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        if len(x) == 0:
            return np.zeros((0, self.cfg.n_classes), dtype=self.dtype)
        return np.concatenate([self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])

    def backward(self, dprobs: np.ndarray) -> np.ndarray:
        """Backprop d(loss)/d(probs) through every layer; gradients land in each layer's `grads`."""
        self._require_train()
        dy = dprobs
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def backward_logits(self, dlogits: np.ndarray) -> np.ndarray:
        """Backprop from the output layer's pre-softmax logits (softmax + cross-entropy fused)."""
        self._require_train()
        head = self.layers[-1][1]
        dy = head.backward_preactivation(dlogits)
        for _, layer in reversed(self.layers[:-1]):
            dy = layer.backward(dy)
        return dy

    def zero_grads(self) -> None:
        for _, layer in self.layers:
            layer.zero_grads()

    def _require_train(self) -> None:
        if not self._last_forward_train:
            raise ModeError("backward called after an inference-mode forward pass")


def build_bilgnet(cfg: BiLGNetConfig, seed: int = 0) -> BiLGNet:
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    layers: List[Tuple[str, Layer]] = []
    dim = cfg.input_dims

    def bi(cell, name: str, width: int, return_sequences: bool = True) -> None:
        nonlocal dim
        layer = Bidirectional(
            cell(dim, width, rng=rng, dtype=dtype),
            cell(dim, width, rng=rng, dtype=dtype),
            return_sequences=return_sequences,
        )
        layers.append((name, layer))
        dim = layer.output_dim

    for i, w in enumerate(cfg.encoder_widths, start=1):
        bi(LSTM, f"encoder{i}", w)
        layers.append((f"encoder{i}_bn", BatchNorm(dim, dtype=dtype)))
    bi(GRU, "latent", cfg.latent_width)
    last = len(cfg.decoder_widths)
    for i, w in enumerate(cfg.decoder_widths, start=1):
        bi(GRU, f"decoder{i}", w, return_sequences=i < last)
        layers.append((f"decoder{i}_bn", BatchNorm(dim, dtype=dtype)))
    layers.append(("bottleneck", Dense(dim, cfg.bottleneck_width, "relu", rng=rng, dtype=dtype)))
    layers.append(("dropout", Dropout(cfg.dropout_rate, rng=np.random.default_rng([seed, 1]))))
    layers.append(("output", Dense(cfg.bottleneck_width, cfg.n_classes, "softmax", rng=rng, dtype=dtype)))

    model = BiLGNet(cfg, layers)
    log.debug("build_bilgnet params=%d layers=%d", model.parameter_count(), len(layers))
    return model
