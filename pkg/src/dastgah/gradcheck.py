from __future__ import annotations

import logging
from typing import Callable, Dict, Optional

import numpy as np

from .layers import GRU, LSTM, BatchNorm, Bidirectional, Dense, Dropout, Layer, softmax
from .model import BiLGNetConfig, build_bilgnet

log = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(loss: Callable[[], float], array: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of `loss` wrt every element of `array`, perturbed in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"], op_flags=[["readwrite"]])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + step
        up = loss()
        array[idx] = orig - step
        down = loss()
        array[idx] = orig
        grad[idx] = (up - down) / (2.0 * step)
    return grad


def check_layer(
    layer: Layer,
    x: np.ndarray,
    rng: np.random.Generator,
    before_forward: Optional[Callable[[], None]] = None,
) -> Dict[str, float]:
    """Compare analytic and numeric gradients of sum(y * upstream) for the input and every parameter."""
    x = x.astype(np.float64)

    def run() -> np.ndarray:
        if before_forward is not None:
            before_forward()
        return layer.forward(x, train=True)

    upstream = rng.normal(size=run().shape)

    def loss() -> float:
        return float(np.sum(run() * upstream))

    run()
    dx = layer.backward(upstream)
    analytic = {name: g.copy() for name, g in layer.grads.items()}

    errors = {"input": relative_error(dx, numeric_gradient(loss, x))}
    for name, param in layer.params.items():
        errors[name] = relative_error(analytic[name], numeric_gradient(loss, param))
    return errors


def check_softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fused softmax + mean cross-entropy gradient (probs - onehot) / batch against finite differences."""
    z = logits.astype(np.float64).copy()
    batch = len(labels)

    def loss() -> float:
        p = softmax(z)
        return float(-np.mean(np.log(p[np.arange(batch), labels])))

    onehot = np.zeros_like(z)
    onehot[np.arange(batch), labels] = 1.0
    analytic = (softmax(z) - onehot) / batch
    return relative_error(analytic, numeric_gradient(loss, z))


def tiny_model_config() -> BiLGNetConfig:
    return BiLGNetConfig(
        input_dims=4,
        encoder_widths=(3, 2),
        latent_width=2,
        decoder_widths=(2, 4),
        bottleneck_width=3,
        dropout_rate=0.5,
        dtype="float64",
    )


def check_model(cfg: BiLGNetConfig, x: np.ndarray, labels: np.ndarray, seed: int = 0) -> Dict[str, float]:
    model = build_bilgnet(cfg, seed=seed)
    batch = len(labels)

    def run() -> np.ndarray:
        model.set_dropout_rng(np.random.default_rng([seed, 99]))
        return model.forward(x, train=True)

    def loss() -> float:
        p = run()
        return float(-np.mean(np.log(p[np.arange(batch), labels])))

    probs = run()
    onehot = np.zeros_like(probs)
    onehot[np.arange(batch), labels] = 1.0
    model.backward_logits((probs - onehot) / batch)
    analytic = {name: g.copy() for name, g in model.named_gradients().items()}

    return {name: relative_error(analytic[name], numeric_gradient(loss, p)) for name, p in model.named_parameters().items()}


def run_gradcheck(seed: int = 0) -> Dict[str, float]:
    """Worst relative error per layer type on small random float64 instances."""
    rng = np.random.default_rng(seed)
    f64 = np.float64
    batch, steps, dims = 3, 5, 4
    seq = rng.normal(size=(batch, steps, dims))
    flat = rng.normal(size=(batch, 6))

    def worst(errors: Dict[str, float]) -> float:
        return max(errors.values())

    results: Dict[str, float] = {}
    for act in Dense.ACTIVATIONS:
        results[f"dense_{act}"] = worst(check_layer(Dense(6, 5, act, rng=rng, dtype=f64), flat, rng))

    bn = BatchNorm(dims, dtype=f64)
    bn.params["gamma"][...] = rng.uniform(0.5, 1.5, size=dims)
    bn.params["beta"][...] = rng.normal(size=dims)
    results["batchnorm"] = worst(check_layer(bn, seq, rng))

    results["dropout_off"] = worst(check_layer(Dropout(0.0), flat, rng))
    drop = Dropout(0.5)

    def reseed() -> None:
        drop.rng = np.random.default_rng([seed, 7])

    results["dropout_fixed_mask"] = worst(check_layer(drop, flat, rng, before_forward=reseed))

    results["lstm"] = worst(check_layer(LSTM(dims, 5, rng=rng, dtype=f64), seq, rng))
    results["gru"] = worst(check_layer(GRU(dims, 5, rng=rng, dtype=f64), seq, rng))
    for cell, name in ((LSTM, "lstm"), (GRU, "gru")):
        for return_sequences in (True, False):
            layer = Bidirectional(
                cell(dims, 4, rng=rng, dtype=f64), cell(dims, 4, rng=rng, dtype=f64), return_sequences=return_sequences
            )
            suffix = "seq" if return_sequences else "final"
            results[f"bi{name}_{suffix}"] = worst(check_layer(layer, seq, rng))

    labels = rng.integers(0, 7, size=batch)
    results["softmax_cross_entropy"] = check_softmax_cross_entropy(rng.normal(size=(batch, 7)), labels)

    cfg = tiny_model_config()
    x = rng.normal(size=(batch, 4, cfg.input_dims))
    results["bilgnet"] = worst(check_model(cfg, x, labels, seed=seed))

    for name, err in results.items():
        log.debug("gradcheck %s max_rel_err=%.3e", name, err)
    return results
