from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy import fft as sp_fft
from scipy.ndimage import convolve1d

log = logging.getLogger(__name__)

DB_FLOOR_POWER = 1e-10
CHROMA_BINS = 24
CHROMA_MIN_HZ = 32.0
CENS_THRESHOLDS = (0.05, 0.1, 0.2, 0.4)


class SignalTooShortError(ValueError):
    pass


class DegenerateFilterbankError(ValueError):
    pass


class FeatureShapeError(ValueError):
    pass


class FeatureKind(str, Enum):
    MFCC = "mfcc"
    CHROMA_CENS = "chroma_cens"
    MEL = "mel"

    @property
    def code(self) -> int:
        return _KIND_CODES[self]

    @property
    def dims(self) -> int:
        return _KIND_DIMS[self]

    @classmethod
    def from_code(cls, code: int) -> "FeatureKind":
        for kind, c in _KIND_CODES.items():
            if c == code:
                return kind
        raise ValueError(f"unknown feature kind code {code}")

    @classmethod
    def parse(cls, name: str) -> "FeatureKind":
        cleaned = (name or "").strip().lower().replace("-", "_")
        try:
            return cls(cleaned)
        except ValueError:
            raise ValueError(f"unknown feature kind {name!r} (expected mfcc, chroma-cens or mel)") from None


_KIND_CODES = {FeatureKind.MFCC: 0, FeatureKind.CHROMA_CENS: 1, FeatureKind.MEL: 2}
_KIND_DIMS = {FeatureKind.MFCC: 24, FeatureKind.CHROMA_CENS: CHROMA_BINS, FeatureKind.MEL: 128}


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 2048
    # 25% overlap between consecutive frames.
    hop_length: int = 1536
    window: str = "hann"

    def __post_init__(self) -> None:
        n = int(self.frame_length)
        if n < 1 or n & (n - 1):
            raise ValueError(f"frame_length must be a power of two, got {self.frame_length}")
        if not (0 < int(self.hop_length) <= n):
            raise ValueError(f"hop_length must be in (0, {n}], got {self.hop_length}")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"window must be 'hann' or 'rect', got {self.window!r}")

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.frame_length:
            return 0
        return (n_samples - self.frame_length) // self.hop_length + 1


@dataclass(frozen=True, eq=False)
class Spectrogram:
    values: np.ndarray
    sample_rate: int
    n_fft: int
    hop_length: int

    @property
    def bin_count(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    @property
    def frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    kind: FeatureKind

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[1] != self.kind.dims:
            raise FeatureShapeError(f"{self.kind.value} features need {self.kind.dims} dims, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise FeatureShapeError(f"{self.kind.value} features contain non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    if n < 1:
        raise ValueError(f"window length must be >= 1, got {n}")
    k = np.arange(n, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def frame_signal(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < cfg.frame_length:
        raise SignalTooShortError(f"signal of {len(x)} samples is shorter than one frame ({cfg.frame_length})")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_length)[:: cfg.hop_length]
    return np.ascontiguousarray(frames)


@lru_cache(maxsize=16)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int) -> np.ndarray:
    tw = np.exp(-2j * np.pi * np.arange(size // 2) / size)
    tw.setflags(write=False)
    return tw


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT over the last axis."""
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    lead = a.shape[:-1]
    a = a[..., _bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = a.reshape(*lead, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size)
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return a


def naive_dft(x: np.ndarray) -> np.ndarray:
    """O(N^2) reference transform."""
    v = np.asarray(x, dtype=np.complex128)
    n = v.shape[-1]
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return v @ basis.T


def _analysis_window(cfg: StftConfig) -> np.ndarray:
    if cfg.window == "rect":
        return np.ones(cfg.frame_length)
    return hann_window(cfg.frame_length)


def stft(samples: np.ndarray, cfg: StftConfig, sample_rate: int = 22050) -> Spectrogram:
    frames = frame_signal(samples, cfg) * _analysis_window(cfg)
    spectrum = fft(frames)[:, : cfg.frame_length // 2 + 1]
    power = spectrum.real**2 + spectrum.imag**2
    return Spectrogram(values=power, sample_rate=sample_rate, n_fft=cfg.frame_length, hop_length=cfg.hop_length)


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """n_mels + 2 frequencies, evenly spaced in mel; entry i + 1 is the centre of band i."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


@lru_cache(maxsize=8)
def _cached_filterbank(n_mels: int, sample_rate: int, n_fft: int, f_min: float, f_max: float) -> np.ndarray:
    edges = mel_band_edges(n_mels, f_min, f_max)
    center_bins = np.rint(edges[1:-1] * n_fft / sample_rate).astype(np.int64)
    if np.any(np.diff(center_bins) == 0):
        raise DegenerateFilterbankError(
            f"{n_mels} mel bands collapse onto shared FFT bins (n_fft={n_fft}, sr={sample_rate})"
        )
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb *= 2.0 / (upper - lower)
    fb.setflags(write=False)
    return fb


def mel_filterbank(
    n_mels: int = 128,
    sample_rate: int = 22050,
    n_fft: int = 2048,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> np.ndarray:
    """HTK-scale triangular filters, area normalised, shape (n_mels, n_fft//2 + 1)."""
    f_max = sample_rate / 2.0 if f_max is None else float(f_max)
    if n_mels < 1:
        raise ValueError(f"n_mels must be >= 1, got {n_mels}")
    if not (f_min < f_max <= sample_rate / 2.0):
        raise ValueError(f"need f_min < f_max <= {sample_rate / 2.0}, got f_min={f_min} f_max={f_max}")
    return _cached_filterbank(int(n_mels), int(sample_rate), int(n_fft), float(f_min), float(f_max))


def power_to_db(power: np.ndarray) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(power, DB_FLOOR_POWER))


def mel_spectrogram(spec: Spectrogram, fb: np.ndarray) -> FeatureMatrix:
    if fb.shape[1] != spec.values.shape[1]:
        raise FeatureShapeError(f"filterbank has {fb.shape[1]} bins, spectrogram has {spec.values.shape[1]}")
    return FeatureMatrix(values=power_to_db(spec.values @ fb.T), kind=FeatureKind.MEL)


def dct_frames(values: np.ndarray) -> np.ndarray:
    return sp_fft.dct(values, type=2, norm="ortho", axis=-1)


def idct_frames(coeffs: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-III; inverts dct_frames when every coefficient is kept."""
    return sp_fft.idct(coeffs, type=2, norm="ortho", axis=-1)


def mfcc(mel_db: FeatureMatrix, n_coeff: int = 24) -> FeatureMatrix:
    if mel_db.kind is not FeatureKind.MEL:
        raise FeatureShapeError(f"mfcc needs mel input, got {mel_db.kind.value}")
    if n_coeff > mel_db.dims:
        raise ValueError(f"n_coeff={n_coeff} exceeds the {mel_db.dims} mel bands")
    return FeatureMatrix(values=dct_frames(mel_db.values)[:, :n_coeff], kind=FeatureKind.MFCC)


def chroma_map(n_fft: int, sample_rate: int, f_ref: float = 440.0) -> np.ndarray:
    """(bins, 24) 0/1 matrix assigning each FFT bin to its nearest quartertone class."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    mapping = np.zeros((len(freqs), CHROMA_BINS))
    usable = freqs >= CHROMA_MIN_HZ
    classes = np.mod(np.rint(CHROMA_BINS * np.log2(freqs[usable] / f_ref)).astype(np.int64), CHROMA_BINS)
    mapping[np.flatnonzero(usable), classes] = 1.0
    return mapping


def chroma24(spec: Spectrogram, f_ref: float = 440.0) -> np.ndarray:
    return spec.values @ chroma_map(spec.n_fft, spec.sample_rate, f_ref)


def cens_kernel(smooth_len: int) -> np.ndarray:
    kernel = np.hanning(smooth_len + 2)[1:-1]
    return kernel / kernel.sum()


def cens(chroma: np.ndarray, smooth_len: int = 41) -> FeatureMatrix:
    c = np.asarray(chroma, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("chroma must be non-negative")

    totals = c.sum(axis=1, keepdims=True)
    normed = np.where(totals > 0, c / np.where(totals > 0, totals, 1.0), 1.0 / CHROMA_BINS)

    quantized = np.zeros_like(normed)
    for t in CENS_THRESHOLDS:
        quantized += 0.25 * (normed > t)

    smoothed = convolve1d(quantized, cens_kernel(smooth_len), axis=0, mode="constant", cval=0.0)

    norms = np.linalg.norm(smoothed, axis=1, keepdims=True)
    out = np.where(norms > 0, smoothed / np.where(norms > 0, norms, 1.0), 0.0)
    return FeatureMatrix(values=out, kind=FeatureKind.CHROMA_CENS)


def extract(
    samples: np.ndarray,
    kind: FeatureKind,
    cfg: StftConfig,
    sample_rate: int = 22050,
) -> FeatureMatrix:
    spec = stft(samples, cfg, sample_rate=sample_rate)
    if kind is FeatureKind.CHROMA_CENS:
        return cens(chroma24(spec))
    mel_db = mel_spectrogram(spec, mel_filterbank(FeatureKind.MEL.dims, sample_rate, cfg.frame_length))
    if kind is FeatureKind.MEL:
        return mel_db
    return mfcc(mel_db, FeatureKind.MFCC.dims)
