import json
import math

import numpy as np
import pytest

from dastgah.layers import ShapeError
from dastgah.model import BiLGNetConfig, build_bilgnet
from dastgah.training import (
    AdamState,
    PlateauScheduler,
    Standardizer,
    TrainConfig,
    TrainingError,
    accuracy,
    adam_step,
    fit_arrays,
    plateau_scheduler,
    predict,
    scce_loss,
)


def test_scce_uniform_is_log_seven() -> None:
    probs = np.full((4, 7), 1.0 / 7.0)
    assert scce_loss(probs, np.array([0, 3, 6, 2])) == pytest.approx(math.log(7))


def test_scce_perfect_and_floored() -> None:
    probs = np.eye(7)[[1, 4]]
    assert scce_loss(probs, np.array([1, 4])) == pytest.approx(0.0)
    assert scce_loss(probs, np.array([0, 4])) == pytest.approx(-math.log(1e-12) / 2)


def test_scce_rejects_bad_input() -> None:
    probs = np.full((2, 7), 1.0 / 7.0)
    with pytest.raises(ValueError, match="label 7"):
        scce_loss(probs, np.array([0, 7]))
    with pytest.raises(ShapeError):
        scce_loss(probs, np.array([0, 1, 2]))
    with pytest.raises(ValueError, match="sum to 1"):
        scce_loss(np.ones((2, 7)), np.array([0, 1]))


def test_adam_first_step_moves_by_learning_rate() -> None:
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -4.0, 1e-3])}
    adam_step(params, grads, AdamState(), 0.001)
    assert params["w"] == pytest.approx([0.999, -1.999, 2.999], abs=1e-6)


def test_adam_zero_gradient_leaves_params() -> None:
    params = {"w": np.array([1.0, 2.0])}
    state = AdamState()
    for _ in range(3):
        adam_step(params, {"w": np.zeros(2)}, state, 0.01)
    assert params["w"].tolist() == [1.0, 2.0]
    assert state.t == 3


def test_adam_descends_a_quadratic_bowl() -> None:
    params = {"theta": np.array([1.0, -1.0])}
    state = AdamState()
    for _ in range(200):
        adam_step(params, {"theta": 2.0 * params["theta"]}, state, 0.1)
    assert np.all(np.abs(params["theta"]) < 1e-2)


def test_adam_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState(), 0.1)
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(3)}, {"v": np.zeros(3)}, AdamState(), 0.1)


def test_plateau_reduces_after_patience() -> None:
    assert plateau_scheduler([0.5] + [0.5] * 7) == pytest.approx(0.0007)
    assert plateau_scheduler([0.5] + [0.5] * 6) == pytest.approx(0.001)


def test_plateau_improvement_resets_wait() -> None:
    assert plateau_scheduler([0.5] * 5 + [0.6] * 3) == pytest.approx(0.001)


def test_plateau_reduces_again_after_second_plateau() -> None:
    assert plateau_scheduler([0.5] * 15) == pytest.approx(0.00049)


def test_plateau_gain_below_min_delta_does_not_count() -> None:
    assert plateau_scheduler([0.5, 0.5005, 0.5009, 0.5, 0.5, 0.5, 0.5, 0.5]) == pytest.approx(0.0007)


def test_plateau_reduction_is_logged(caplog) -> None:
    sched = PlateauScheduler(patience=1)
    with caplog.at_level("WARNING"):
        sched.step(0.3)
        sched.step(0.3)
    assert "plateau" in caplog.text
    assert sched.reductions == 1


def test_plateau_state_round_trips_through_json() -> None:
    fresh = PlateauScheduler()
    assert PlateauScheduler.from_dict(json.loads(json.dumps(fresh.to_dict()))) == fresh
    fresh.step(0.4)
    assert PlateauScheduler.from_dict(json.loads(json.dumps(fresh.to_dict()))) == fresh


def test_train_config_validation() -> None:
    with pytest.raises(ValueError):
        TrainConfig(plateau_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_standardizer() -> None:
    X = np.random.default_rng(0).normal(loc=5.0, scale=3.0, size=(10, 20, 4)).astype(np.float32)
    X[..., 3] = 1.0
    st = Standardizer.fit(X)
    Z = st.transform(X).reshape(-1, 4)
    assert np.allclose(Z[:, :3].mean(axis=0), 0.0, atol=1e-4)
    assert np.allclose(Z[:, :3].std(axis=0), 1.0, atol=1e-4)
    assert np.allclose(Z[:, 3], 0.0)
    with pytest.raises(ShapeError):
        st.transform(np.zeros((1, 2, 5), dtype=np.float32))


def _tiny_cfg(dropout: float = 0.0) -> BiLGNetConfig:
    return BiLGNetConfig(
        input_dims=4,
        encoder_widths=(8, 4, 2),
        latent_width=2,
        decoder_widths=(2, 4, 8),
        bottleneck_width=8,
        dropout_rate=dropout,
    )


def _class_data(per_class: int, steps: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=2.0, size=(7, 1, 4))
    y = np.repeat(np.arange(7), per_class)
    X = centers[y] + rng.normal(scale=0.3, size=(len(y), steps, 4))
    return X.astype(np.float32), y.astype(np.int64)


def test_training_is_deterministic() -> None:
    X, y = _class_data(2, 5)
    cfg = TrainConfig(max_epochs=3, batch_size=4, learning_rate=0.01)
    runs = []
    for _ in range(2):
        model = build_bilgnet(_tiny_cfg(dropout=0.5), seed=cfg.seed)
        state = fit_arrays(model, X, y, X, y, cfg)
        runs.append((model.named_parameters(), [s.to_dict() for s in state.history]))
    (pa, ha), (pb, hb) = runs
    assert ha == hb
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_fit_writes_epoch_log(tmp_path) -> None:
    X, y = _class_data(1, 4)
    log_path = tmp_path / "epochs.jsonl"
    seen = []
    state = fit_arrays(
        build_bilgnet(_tiny_cfg()),
        X,
        y,
        X,
        y,
        TrainConfig(max_epochs=2, batch_size=7),
        log_path=log_path,
        on_epoch=lambda model, st: seen.append(st.epoch),
    )
    rows = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert set(rows[0]) == {"epoch", "train_loss", "train_accuracy", "val_accuracy", "learning_rate"}
    assert seen == [1, 2]
    assert state.epoch == 2


def test_fit_rejects_empty_split_and_width_mismatch() -> None:
    X, y = _class_data(1, 4)
    model = build_bilgnet(_tiny_cfg())
    with pytest.raises(TrainingError, match="empty"):
        fit_arrays(model, X, y, X[:0], y[:0], TrainConfig(max_epochs=1))
    with pytest.raises(TrainingError, match="input_dims"):
        fit_arrays(model, X[..., :3], y, X[..., :3], y, TrainConfig(max_epochs=1))


def test_standardize_option_fits_on_train() -> None:
    X, y = _class_data(1, 4)
    state = fit_arrays(build_bilgnet(_tiny_cfg()), X + 10.0, y, X, y, TrainConfig(max_epochs=1, standardize=True))
    assert state.standardizer is not None
    assert np.all(state.standardizer.mean > 5.0)


class _Memorized(Exception):
    pass


@pytest.mark.slow
def test_small_model_memorizes_random_labels() -> None:
    rng = np.random.default_rng(3)
    X = rng.normal(size=(32, 286, 24)).astype(np.float32)
    y = rng.integers(0, 7, size=32)
    cfg = BiLGNetConfig(
        input_dims=24,
        encoder_widths=(8, 4, 2),
        latent_width=2,
        decoder_widths=(2, 4, 8),
        dropout_rate=0.0,
    )
    model = build_bilgnet(cfg, seed=0)
    train = TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=300, plateau_patience=50)

    def stop_when_memorized(_model, state) -> None:
        if state.history[-1].train_accuracy == 1.0:
            raise _Memorized(state.epoch)

    with pytest.raises(_Memorized):
        fit_arrays(model, X, y, X, y, train, on_epoch=stop_when_memorized)


def test_validation_accuracy_uses_inference_mode() -> None:
    X, y = _class_data(2, 5)
    X_val, y_val = _class_data(1, 5, seed=4)
    model = build_bilgnet(_tiny_cfg(dropout=0.5), seed=2)
    state = fit_arrays(model, X, y, X_val, y_val, TrainConfig(max_epochs=2, batch_size=4, learning_rate=0.01))
    probs = model.predict_proba(X_val, batch_size=4)
    assert np.array_equal(probs, model.predict_proba(X_val, batch_size=4))
    assert state.history[-1].val_accuracy == accuracy(probs, y_val)


def test_train_config_dropout_reaches_model() -> None:
    X, y = _class_data(1, 4)
    model = build_bilgnet(_tiny_cfg(dropout=0.0))
    fit_arrays(model, X, y, X, y, TrainConfig(max_epochs=1, dropout_rate=0.25))
    assert model.cfg.dropout_rate == 0.25
    assert model.layer("dropout").rate == 0.25

    untouched = build_bilgnet(_tiny_cfg(dropout=0.5))
    fit_arrays(untouched, X, y, X, y, TrainConfig(max_epochs=1))
    assert untouched.layer("dropout").rate == 0.5
    with pytest.raises(ValueError):
        TrainConfig(dropout_rate=1.0)


def test_accuracy_and_predict() -> None:
    assert accuracy(np.eye(7)[[0, 1]], np.array([0, 2])) == 0.5
    assert accuracy(np.zeros((0, 7)), np.array([], dtype=int)) == 0.0

    X, y = _class_data(1, 4)
    model = build_bilgnet(_tiny_cfg())
    model.forward(X, train=True)
    st = Standardizer.fit(X)
    probs = predict(model, X, standardizer=st)
    assert probs.shape == (7, 7)
    assert np.allclose(probs, model.predict_proba(st.transform(X)))
