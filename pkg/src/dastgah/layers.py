from __future__ import annotations

from typing import Dict, Optional

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class ModeError(RuntimeError):
    pass


class UninitializedStatisticsError(RuntimeError):
    pass


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int], dtype=np.float32) -> np.ndarray:
    fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], dtype=np.float32) -> np.ndarray:
    rows, cols = shape
    a = rng.normal(0.0, 1.0, size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(dtype)


class Layer:
    """Base for layers with an explicit forward cache and analytic backward.

    `params` and `grads` map names to arrays; optimizers update params in place.
    """

    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def _require_cache(self):
        if self._cache is None:
            raise ModeError(f"{type(self).__name__}.backward needs a preceding training-mode forward pass")
        return self._cache


def _check_sequence(x: np.ndarray, dims: int, name: str) -> None:
    if x.ndim != 3:
        raise ShapeError(f"{name} expects batch x time x features, got shape {x.shape}")
    if x.shape[2] != dims:
        raise ShapeError(f"{name} expects {dims} input features, got {x.shape[2]}")
    if x.shape[1] < 1:
        raise ShapeError(f"{name} needs at least one time step")


class LSTM(Layer):
    """Unidirectional LSTM; gate blocks in W, U and b are ordered i, f, g, o."""

    def __init__(self, input_dim: int, hidden: int, rng: Optional[np.random.Generator] = None, dtype=np.float32) -> None:
        super().__init__()
        self.input_dim = int(input_dim)
        self.hidden = int(hidden)
        rng = rng or np.random.default_rng(0)
        h = self.hidden
        b = np.zeros(4 * h, dtype=dtype)
        b[h : 2 * h] = 1.0
        self.params = {
            "W": glorot_uniform(rng, (self.input_dim, 4 * h), dtype),
            "U": orthogonal(rng, (h, 4 * h), dtype),
            "b": b,
        }
        self.zero_grads()

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        h0: Optional[np.ndarray] = None,
        c0: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        _check_sequence(x, self.input_dim, "LSTM")
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        B, T, _ = x.shape
        h = self.hidden
        dtype = W.dtype

        hs = np.zeros((B, T + 1, h), dtype=dtype)
        cs = np.zeros((B, T + 1, h), dtype=dtype)
        if h0 is not None:
            hs[:, 0] = h0
        if c0 is not None:
            cs[:, 0] = c0
        gates = np.empty((B, T, 4 * h), dtype=dtype)
        tcs = np.empty((B, T, h), dtype=dtype)

        xw = x.astype(dtype, copy=False) @ W + b
        for t in range(T):
            a = xw[:, t] + hs[:, t] @ U
            i = expit(a[:, :h])
            f = expit(a[:, h : 2 * h])
            g = np.tanh(a[:, 2 * h : 3 * h])
            o = expit(a[:, 3 * h :])
            cs[:, t + 1] = f * cs[:, t] + i * g
            tcs[:, t] = np.tanh(cs[:, t + 1])
            hs[:, t + 1] = o * tcs[:, t]
            gates[:, t, :h] = i
            gates[:, t, h : 2 * h] = f
            gates[:, t, 2 * h : 3 * h] = g
            gates[:, t, 3 * h :] = o

        self._cache = (x, hs, cs, gates, tcs) if train else None
        return hs[:, 1:].copy()

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, hs, cs, gates, tcs = self._require_cache()
        W, U = self.params["W"], self.params["U"]
        B, T, _ = x.shape
        h = self.hidden
        if dy.shape != (B, T, h):
            raise ShapeError(f"LSTM upstream gradient must be {(B, T, h)}, got {dy.shape}")

        dA = np.empty((B, T, 4 * h), dtype=W.dtype)
        dh_next = np.zeros((B, h), dtype=W.dtype)
        dc_next = np.zeros((B, h), dtype=W.dtype)
        for t in range(T - 1, -1, -1):
            i = gates[:, t, :h]
            f = gates[:, t, h : 2 * h]
            g = gates[:, t, 2 * h : 3 * h]
            o = gates[:, t, 3 * h :]
            tc = tcs[:, t]
            dh = dy[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dA[:, t, :h] = dc * g * i * (1.0 - i)
            dA[:, t, h : 2 * h] = dc * cs[:, t] * f * (1.0 - f)
            dA[:, t, 2 * h : 3 * h] = dc * i * (1.0 - g * g)
            dA[:, t, 3 * h :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dA[:, t] @ U.T

        self.grads = {
            "W": np.einsum("btd,btk->dk", x.astype(W.dtype, copy=False), dA),
            "U": np.einsum("bth,btk->hk", hs[:, :-1], dA),
            "b": dA.sum(axis=(0, 1)),
        }
        return dA @ W.T


class GRU(Layer):
    """Single-bias GRU, blocks ordered z, r, n; the reset gate applies before U_n."""

    def __init__(self, input_dim: int, hidden: int, rng: Optional[np.random.Generator] = None, dtype=np.float32) -> None:
        super().__init__()
        self.input_dim = int(input_dim)
        self.hidden = int(hidden)
        rng = rng or np.random.default_rng(0)
        h = self.hidden
        self.params = {
            "W": glorot_uniform(rng, (self.input_dim, 3 * h), dtype),
            "U": orthogonal(rng, (h, 3 * h), dtype),
            "b": np.zeros(3 * h, dtype=dtype),
        }
        self.zero_grads()

    def forward(self, x: np.ndarray, train: bool = False, h0: Optional[np.ndarray] = None) -> np.ndarray:
        _check_sequence(x, self.input_dim, "GRU")
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        B, T, _ = x.shape
        h = self.hidden
        dtype = W.dtype

        hs = np.zeros((B, T + 1, h), dtype=dtype)
        if h0 is not None:
            hs[:, 0] = h0
        gates = np.empty((B, T, 3 * h), dtype=dtype)
        rhs = np.empty((B, T, h), dtype=dtype)

        xw = x.astype(dtype, copy=False) @ W + b
        U_zr, U_n = U[:, : 2 * h], U[:, 2 * h :]
        for t in range(T):
            hp = hs[:, t]
            a_zr = xw[:, t, : 2 * h] + hp @ U_zr
            z = expit(a_zr[:, :h])
            r = expit(a_zr[:, h:])
            rh = r * hp
            n = np.tanh(xw[:, t, 2 * h :] + rh @ U_n)
            hs[:, t + 1] = (1.0 - z) * n + z * hp
            gates[:, t, :h] = z
            gates[:, t, h : 2 * h] = r
            gates[:, t, 2 * h :] = n
            rhs[:, t] = rh

        self._cache = (x, hs, gates, rhs) if train else None
        return hs[:, 1:].copy()

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, hs, gates, rhs = self._require_cache()
        W, U = self.params["W"], self.params["U"]
        B, T, _ = x.shape
        h = self.hidden
        if dy.shape != (B, T, h):
            raise ShapeError(f"GRU upstream gradient must be {(B, T, h)}, got {dy.shape}")

        U_z, U_r, U_n = U[:, :h], U[:, h : 2 * h], U[:, 2 * h :]
        dA = np.empty((B, T, 3 * h), dtype=W.dtype)
        dh_next = np.zeros((B, h), dtype=W.dtype)
        for t in range(T - 1, -1, -1):
            hp = hs[:, t]
            z = gates[:, t, :h]
            r = gates[:, t, h : 2 * h]
            n = gates[:, t, 2 * h :]
            dh = dy[:, t] + dh_next
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            d_rh = da_n @ U_n.T
            da_z = dh * (hp - n) * z * (1.0 - z)
            da_r = d_rh * hp * r * (1.0 - r)
            dA[:, t, :h] = da_z
            dA[:, t, h : 2 * h] = da_r
            dA[:, t, 2 * h :] = da_n
            dh_next = dh * z + d_rh * r + da_z @ U_z.T + da_r @ U_r.T

        dU = np.empty_like(U)
        dU[:, : 2 * h] = np.einsum("bth,btk->hk", hs[:, :-1], dA[:, :, : 2 * h])
        dU[:, 2 * h :] = np.einsum("bth,btk->hk", rhs, dA[:, :, 2 * h :])
        self.grads = {
            "W": np.einsum("btd,btk->dk", x.astype(W.dtype, copy=False), dA),
            "U": dU,
            "b": dA.sum(axis=(0, 1)),
        }
        return dA @ W.T


class Bidirectional(Layer):
    """Runs `fwd` over x and `bwd` over time-reversed x; outputs are concatenated [fwd, bwd].

    Without `return_sequences` the output is each direction's final state.
    """

    def __init__(self, fwd: Layer, bwd: Layer, return_sequences: bool = True) -> None:
        self._cache = None
        if fwd.hidden != bwd.hidden or fwd.input_dim != bwd.input_dim:
            raise ShapeError("bidirectional halves must share input and hidden sizes")
        self.fwd = fwd
        self.bwd = bwd
        self.return_sequences = return_sequences
        self.input_dim = fwd.input_dim
        self.hidden = fwd.hidden
        self._train = False

    @property
    def params(self) -> Dict[str, np.ndarray]:  # type: ignore[override]
        out = {f"fwd.{k}": v for k, v in self.fwd.params.items()}
        out.update({f"bwd.{k}": v for k, v in self.bwd.params.items()})
        return out

    @property
    def grads(self) -> Dict[str, np.ndarray]:  # type: ignore[override]
        out = {f"fwd.{k}": v for k, v in self.fwd.grads.items()}
        out.update({f"bwd.{k}": v for k, v in self.bwd.grads.items()})
        return out

    def zero_grads(self) -> None:
        self.fwd.zero_grads()
        self.bwd.zero_grads()

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        _check_sequence(x, self.input_dim, type(self.fwd).__name__)
        yf = self.fwd.forward(x, train)
        yb_rev = self.bwd.forward(x[:, ::-1], train)
        self._train = train
        self._steps = x.shape[1]
        if self.return_sequences:
            return np.concatenate([yf, yb_rev[:, ::-1]], axis=-1)
        return np.concatenate([yf[:, -1], yb_rev[:, -1]], axis=-1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if not self._train:
            raise ModeError("Bidirectional.backward needs a preceding training-mode forward pass")
        h = self.hidden
        if self.return_sequences:
            dyf = np.ascontiguousarray(dy[..., :h])
            dyb_rev = np.ascontiguousarray(dy[..., h:][:, ::-1])
        else:
            B = dy.shape[0]
            dyf = np.zeros((B, self._steps, h), dtype=dy.dtype)
            dyb_rev = np.zeros((B, self._steps, h), dtype=dy.dtype)
            dyf[:, -1] = dy[:, :h]
            dyb_rev[:, -1] = dy[:, h:]
        return self.fwd.backward(dyf) + self.bwd.backward(dyb_rev)[:, ::-1]


class BatchNorm(Layer):
    """Per-feature normalization over every leading axis (batch x time for sequences)."""

    def __init__(self, features: int, momentum: float = 0.99, eps: float = 1e-3, dtype=np.float32) -> None:
        super().__init__()
        self.features = int(features)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params = {"gamma": np.ones(features, dtype=dtype), "beta": np.zeros(features, dtype=dtype)}
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.updates = 0
        self.zero_grads()

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[-1] != self.features:
            raise ShapeError(f"BatchNorm expects {self.features} features, got {x.shape[-1]}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        xf = x.reshape(-1, self.features)
        if train:
            mu = xf.mean(axis=0)
            var = xf.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (xf - mu) * inv_std
            self.running_mean[...] = self.momentum * self.running_mean + (1.0 - self.momentum) * mu
            self.running_var[...] = self.momentum * self.running_var + (1.0 - self.momentum) * var
            self.updates += 1
            self._cache = (xhat, inv_std, x.shape)
        else:
            if self.updates == 0:
                raise UninitializedStatisticsError("BatchNorm inference before any training update")
            xhat = (xf - self.running_mean) / np.sqrt(self.running_var + self.eps)
            self._cache = None
        return (gamma * xhat + beta).reshape(x.shape).astype(gamma.dtype, copy=False)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv_std, shape = self._require_cache()
        gamma = self.params["gamma"]
        dyf = dy.reshape(-1, self.features)
        n = dyf.shape[0]
        self.grads = {"gamma": (dyf * xhat).sum(axis=0), "beta": dyf.sum(axis=0)}
        dxhat = dyf * gamma
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx.reshape(shape)


class Dropout(Layer):
    def __init__(self, rate: float, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        if not (0.0 <= rate < 1.0):
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng = rng or np.random.default_rng(0)
        self._train = False

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._train = train
        if not train or self.rate == 0.0:
            self._cache = None
            return x
        keep = 1.0 - self.rate
        mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        self._cache = mask
        return x * mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if not self._train:
            raise ModeError("Dropout.backward needs a preceding training-mode forward pass")
        return dy if self._cache is None else dy * self._cache


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Dense(Layer):
    ACTIVATIONS = ("relu", "softmax", "none")

    def __init__(
        self,
        input_dim: int,
        units: int,
        activation: str = "none",
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ) -> None:
        super().__init__()
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"activation must be one of {self.ACTIVATIONS}, got {activation!r}")
        self.input_dim = int(input_dim)
        self.units = int(units)
        self.activation = activation
        rng = rng or np.random.default_rng(0)
        self.params = {
            "W": glorot_uniform(rng, (self.input_dim, self.units), dtype),
            "b": np.zeros(self.units, dtype=dtype),
        }
        self.zero_grads()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"Dense expects batch x {self.input_dim}, got shape {x.shape}")
        z = x @ self.params["W"] + self.params["b"]
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "softmax":
            y = softmax(z)
        else:
            y = z
        self._cache = (x, z, y) if train else None
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        _, z, y = self._require_cache()
        if self.activation == "relu":
            dz = dy * (z > 0)
        elif self.activation == "softmax":
            dz = y * (dy - (dy * y).sum(axis=1, keepdims=True))
        else:
            dz = dy
        return self.backward_preactivation(dz)

    def backward_preactivation(self, dz: np.ndarray) -> np.ndarray:
        """Backward from d(loss)/d(xW + b); softmax + cross-entropy enters here with probs - onehot."""
        x, _, _ = self._require_cache()
        W = self.params["W"]
        self.grads = {"W": x.T @ dz, "b": dz.sum(axis=0)}
        return dz @ W.T
