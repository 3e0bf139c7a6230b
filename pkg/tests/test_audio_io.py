import io
import struct

import numpy as np
import pytest
from scipy.io import wavfile

from dastgah.audio_io import (
    PIPELINE_RATE,
    AudioClip,
    UnsupportedFormatError,
    WavDecodeError,
    decode_wav,
    encode_wav,
    load_clip,
    read_wav,
    resample,
    write_wav,
)


def _wav_bytes(format_tag: int, channels: int, rate: int, bits: int, data: bytes) -> bytes:
    block_align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", format_tag, channels, rate, rate * block_align, block_align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


def _scipy_wav(rate: int, samples: np.ndarray) -> bytes:
    buf = io.BytesIO()
    wavfile.write(buf, rate, samples)
    return buf.getvalue()


def test_decode_int16_scaling() -> None:
    raw = np.array([0, 16384, -32768, 32767], dtype=np.int16)
    clip = decode_wav(_scipy_wav(44100, raw))
    assert clip.sample_rate == 44100
    assert clip.samples.tolist() == pytest.approx([0.0, 0.5, -1.0, 32767 / 32768])


def test_decode_uint8_is_offset_binary() -> None:
    raw = np.array([0, 128, 255], dtype=np.uint8)
    clip = decode_wav(_scipy_wav(8000, raw))
    assert clip.samples.tolist() == pytest.approx([-1.0, 0.0, 127 / 128])


def test_decode_24bit_pcm() -> None:
    values = [1 << 22, -(1 << 23), 0]
    data = b"".join(struct.pack("<i", v)[:3] for v in values)
    clip = decode_wav(_wav_bytes(1, 1, 22050, 24, data))
    assert clip.samples.tolist() == pytest.approx([0.5, -1.0, 0.0])


def test_decode_float32_passthrough() -> None:
    raw = np.array([0.25, -0.75, 1.0], dtype=np.float32)
    clip = decode_wav(_scipy_wav(22050, raw))
    assert clip.samples.tolist() == pytest.approx([0.25, -0.75, 1.0])


def test_stereo_is_averaged_to_mono() -> None:
    raw = np.array([[16384, 0], [-16384, -16384]], dtype=np.int16)
    clip = decode_wav(_scipy_wav(22050, raw))
    assert clip.samples.shape == (2,)
    assert clip.samples.tolist() == pytest.approx([0.25, -0.5])


def test_bad_riff_magic_names_the_header() -> None:
    data = _wav_bytes(1, 1, 22050, 16, b"\x00\x00")
    with pytest.raises(WavDecodeError, match="RIFF header"):
        decode_wav(b"RIFX" + data[4:])


def test_truncated_data_chunk_is_reported() -> None:
    data = _wav_bytes(1, 1, 22050, 16, b"\x00\x00" * 10)
    with pytest.raises(WavDecodeError, match="data chunk"):
        decode_wav(data[:-6])


def test_missing_fmt_chunk() -> None:
    body = b"WAVE" + b"data" + struct.pack("<I", 2) + b"\x00\x00"
    with pytest.raises(WavDecodeError, match="fmt chunk"):
        decode_wav(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_compressed_format_is_unsupported() -> None:
    with pytest.raises(UnsupportedFormatError):
        decode_wav(_wav_bytes(2, 1, 22050, 4, b"\x00" * 8))


def test_12bit_pcm_is_unsupported() -> None:
    with pytest.raises(UnsupportedFormatError):
        decode_wav(_wav_bytes(1, 1, 22050, 12, b"\x00" * 8))


def test_encode_round_trip_within_one_lsb(tmp_path) -> None:
    rng = np.random.default_rng(3)
    clip = AudioClip(rng.uniform(-0.9, 0.9, size=1000), PIPELINE_RATE)
    path = write_wav(tmp_path / "x.wav", clip)
    back = read_wav(path)
    assert back.sample_rate == PIPELINE_RATE
    assert np.max(np.abs(back.samples - clip.samples)) <= 1.0 / 32768


def test_encode_rejects_other_rates() -> None:
    with pytest.raises(ValueError):
        encode_wav(AudioClip(np.zeros(10), 44100))


def test_audio_clip_validation() -> None:
    with pytest.raises(ValueError):
        AudioClip(np.zeros((2, 2)), 22050)
    with pytest.raises(ValueError):
        AudioClip(np.array([0.0, np.nan]), 22050)
    with pytest.raises(ValueError):
        AudioClip(np.zeros(4), 0)


def test_resample_same_rate_is_bit_exact_copy() -> None:
    rng = np.random.default_rng(0)
    clip = AudioClip(rng.normal(size=500), PIPELINE_RATE)
    out = resample(clip, PIPELINE_RATE)
    assert out.samples is not clip.samples
    assert np.array_equal(out.samples, clip.samples)


def test_resample_lengths() -> None:
    assert len(resample(AudioClip(np.zeros(44101), 44100))) == 22051
    assert len(resample(AudioClip(np.zeros(48000), 48000))) == 22050
    assert len(resample(AudioClip(np.zeros(0), 44100))) == 0


def _interior_rms(x: np.ndarray) -> float:
    n = len(x)
    mid = x[n // 4 : 3 * n // 4]
    return float(np.sqrt(np.mean(mid**2)))


def test_resample_keeps_passband_tone() -> None:
    t = np.arange(44100) / 44100
    clip = AudioClip(np.sin(2 * np.pi * 1000 * t), 44100)
    out = resample(clip)
    assert out.sample_rate == PIPELINE_RATE
    assert _interior_rms(out.samples) == pytest.approx(1 / np.sqrt(2), rel=1e-2)


def test_resample_rejects_tone_above_new_nyquist() -> None:
    t = np.arange(44100) / 44100
    clip = AudioClip(np.sin(2 * np.pi * 15000 * t), 44100)
    assert _interior_rms(resample(clip).samples) < 1e-3


def test_load_clip_resamples_to_pipeline_rate(tmp_path) -> None:
    path = tmp_path / "in.wav"
    path.write_bytes(_scipy_wav(44100, np.zeros(4410, dtype=np.int16)))
    clip = load_clip(path)
    assert clip.sample_rate == PIPELINE_RATE
    assert len(clip) == 2205
