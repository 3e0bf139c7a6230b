from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

log = logging.getLogger(__name__)

PIPELINE_RATE = 22050

# Kaiser windowed sinc: 64 zero crossings per side of the lower Nyquist.
RESAMPLE_ZERO_CROSSINGS = 64
RESAMPLE_KAISER_BETA = 14.77

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE
_PCM_BITS = (8, 16, 24, 32)


class WavDecodeError(RuntimeError):
    pass


class UnsupportedFormatError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"AudioClip must be mono, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class _WavFormat:
    format_tag: int
    channels: int
    sample_rate: int
    bits: int


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        body_start = pos + 8
        yield chunk_id, body_start, size
        pos = body_start + size + (size & 1)


def _scan_header(data: bytes) -> _WavFormat:
    if len(data) < 12:
        raise WavDecodeError("RIFF header: file shorter than 12 bytes")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF":
        raise WavDecodeError(f"RIFF header: expected b'RIFF', found {riff!r}")
    if wave != b"WAVE":
        raise WavDecodeError(f"RIFF header: expected form type b'WAVE', found {wave!r}")

    fmt: _WavFormat | None = None
    data_seen = False
    for chunk_id, start, size in _iter_chunks(data):
        if chunk_id == b"fmt ":
            if size < 16 or start + 16 > len(data):
                raise WavDecodeError(f"fmt chunk: truncated ({size} bytes)")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", data, start)
            if tag == _WAVE_FORMAT_EXTENSIBLE:
                if size < 40 or start + 26 > len(data):
                    raise WavDecodeError("fmt chunk: extensible format without sub-format GUID")
                tag = struct.unpack_from("<H", data, start + 24)[0]
            fmt = _WavFormat(format_tag=tag, channels=channels, sample_rate=rate, bits=bits)
        elif chunk_id == b"data":
            if fmt is None:
                raise WavDecodeError("data chunk: appears before fmt chunk")
            if start + size > len(data):
                raise WavDecodeError(
                    f"data chunk: declares {size} bytes but only {len(data) - start} present"
                )
            data_seen = True
            break

    if fmt is None:
        raise WavDecodeError("fmt chunk: missing")
    if not data_seen:
        raise WavDecodeError("data chunk: missing")
    if fmt.channels < 1:
        raise WavDecodeError(f"fmt chunk: invalid channel count {fmt.channels}")
    if fmt.sample_rate < 1:
        raise WavDecodeError(f"fmt chunk: invalid sample rate {fmt.sample_rate}")

    if fmt.format_tag == _WAVE_FORMAT_PCM:
        if fmt.bits not in _PCM_BITS:
            raise UnsupportedFormatError(f"PCM bit depth {fmt.bits} not supported")
    elif fmt.format_tag == _WAVE_FORMAT_IEEE_FLOAT:
        if fmt.bits != 32:
            raise UnsupportedFormatError(f"float bit depth {fmt.bits} not supported (only 32)")
    else:
        raise UnsupportedFormatError(f"WAV format tag 0x{fmt.format_tag:04x} not supported")
    return fmt


def _to_unit_range(raw: np.ndarray, fmt: _WavFormat) -> np.ndarray:
    if raw.dtype == np.uint8:
        return (raw.astype(np.float64) - 128.0) / 128.0
    if raw.dtype == np.int16:
        return raw.astype(np.float64) / 32768.0
    if raw.dtype == np.int32:
        # 24-bit data arrives left-justified in int32.
        return raw.astype(np.float64) / 2147483648.0
    if raw.dtype == np.float32:
        return raw.astype(np.float64)
    raise UnsupportedFormatError(f"unexpected sample container {raw.dtype} for {fmt.bits}-bit data")


def decode_wav(data: bytes) -> AudioClip:
    """Decode RIFF/WAVE bytes into a mono clip at the file's native rate.

    Integer samples of depth b are scaled by 1/2**(b-1); channels are averaged.
    """
    fmt = _scan_header(data)
    try:
        rate, raw = wavfile.read(io.BytesIO(data))
    except ValueError as exc:
        raise WavDecodeError(f"data chunk: {exc}") from exc

    samples = _to_unit_range(np.asarray(raw), fmt)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise WavDecodeError("data chunk: non-finite float samples")
    log.debug("decode_wav rate=%s channels=%s bits=%s frames=%s", rate, fmt.channels, fmt.bits, len(samples))
    return AudioClip(samples=samples, sample_rate=int(rate))


def encode_wav(clip: AudioClip) -> bytes:
    """16-bit PCM mono at the pipeline rate; the only layout this package writes."""
    if clip.sample_rate != PIPELINE_RATE:
        raise ValueError(f"encode_wav writes {PIPELINE_RATE} Hz only, clip is {clip.sample_rate} Hz")
    pcm = np.clip(np.rint(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    wavfile.write(buf, PIPELINE_RATE, pcm)
    return buf.getvalue()


def read_wav(path: str | Path) -> AudioClip:
    with open(path, "rb") as f:
        return decode_wav(f.read())


def write_wav(path: str | Path, clip: AudioClip) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(encode_wav(clip))
    return p


def _resample_filter(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    half_len = RESAMPLE_ZERO_CROSSINGS * max_rate
    return firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", RESAMPLE_KAISER_BETA))


def resample(clip: AudioClip, target_rate: int = PIPELINE_RATE) -> AudioClip:
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if clip.sample_rate == target_rate:
        return AudioClip(samples=clip.samples.copy(), sample_rate=target_rate)

    g = math.gcd(clip.sample_rate, target_rate)
    up = target_rate // g
    down = clip.sample_rate // g
    out_len = int(math.floor(len(clip.samples) * up / down + 0.5))
    if len(clip.samples) == 0:
        return AudioClip(samples=np.zeros(0), sample_rate=target_rate)

    y = resample_poly(clip.samples, up, down, window=_resample_filter(up, down))
    if len(y) >= out_len:
        y = y[:out_len]
    else:
        y = np.pad(y, (0, out_len - len(y)))
    log.debug("resample %s->%s up=%s down=%s frames=%s", clip.sample_rate, target_rate, up, down, out_len)
    return AudioClip(samples=y, sample_rate=target_rate)


def load_clip(path: str | Path, target_rate: int = PIPELINE_RATE) -> AudioClip:
    return resample(read_wav(path), target_rate)
