from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, List, Tuple

import numpy as np

from .audio_io import PIPELINE_RATE, AudioClip, write_wav
from .dataset import Dastgah, Instrument, RecordEntry, write_manifest

log = logging.getLogger(__name__)

STEPS_PER_OCTAVE = 24
# A6; quartertone neighbours of the fundamental sit about five FFT bins apart at n_fft=2048
DEFAULT_TONIC_HZ = 1760.0
BASE_TEMPLATE: FrozenSet[int] = frozenset({0, 4, 7, 10, 14, 18, 21})

# Each derived scale moves exactly one degree of the base scale by one quartertone.
_SHIFTS: Tuple[Tuple[int, int], ...] = ((21, 22), (10, 11), (7, 8), (4, 3), (18, 17), (14, 15))


def _shifted(template: FrozenSet[int], old: int, new: int) -> FrozenSet[int]:
    return frozenset((template - {old}) | {new})


TEMPLATES: Tuple[FrozenSet[int], ...] = (BASE_TEMPLATE,) + tuple(_shifted(BASE_TEMPLATE, a, b) for a, b in _SHIFTS)

HARMONICS = 4
NOTE_MIN_S = 0.2
NOTE_MAX_S = 0.6
# attack and release length
RAMP_S = 0.005
NOISE_DBFS = -30.0
PEAK = 0.8


@dataclass(frozen=True)
class SynthSpec:
    clips_per_class: int = 30
    clip_seconds: float = 60.0
    seed: int = 0
    n_classes: int = 7
    tonic_hz: float = DEFAULT_TONIC_HZ
    random_tonic: bool = False

    def __post_init__(self) -> None:
        if self.clips_per_class < 1:
            raise ValueError(f"clips_per_class must be >= 1, got {self.clips_per_class}")
        if self.clip_seconds <= 0:
            raise ValueError(f"clip_seconds must be positive, got {self.clip_seconds}")
        if not (1 <= self.n_classes <= len(TEMPLATES)):
            raise ValueError(f"n_classes must be in 1..{len(TEMPLATES)}, got {self.n_classes}")
        if self.tonic_hz <= 0:
            raise ValueError(f"tonic_hz must be positive, got {self.tonic_hz}")


def harmonic_pitch_classes(template: FrozenSet[int]) -> FrozenSet[int]:
    """Pitch classes a template's tones land on once harmonics 1..4 are included.

    Harmonics 2 and 4 are octaves; harmonic 3 sits a twelfth up, 38 quartertones, i.e. +14 mod 24.
    """
    return frozenset(template) | frozenset((pc + 14) % STEPS_PER_OCTAVE for pc in template)


def render_tone(freq: float, n_samples: int, sample_rate: int = PIPELINE_RATE) -> np.ndarray:
    t = np.arange(n_samples) / sample_rate
    dur = max(n_samples / sample_rate, 1.0 / sample_rate)
    tone = np.zeros(n_samples)
    norm = sum(1.0 / h for h in range(1, HARMONICS + 1))
    for h in range(1, HARMONICS + 1):
        if h * freq >= sample_rate / 2:
            break
        tone += np.sin(2.0 * np.pi * h * freq * t) / h
    env = np.exp(-t / dur)
    ramp = min(int(RAMP_S * sample_rate), n_samples // 2)
    if ramp > 0:
        env[:ramp] *= np.linspace(0.0, 1.0, ramp, endpoint=False)
        env[-ramp:] *= np.linspace(1.0, 0.0, ramp, endpoint=False)
    return PEAK * tone * env / norm


def render_melody(
    template: FrozenSet[int],
    seconds: float,
    rng: np.random.Generator,
    tonic_hz: float = DEFAULT_TONIC_HZ,
    sample_rate: int = PIPELINE_RATE,
) -> np.ndarray:
    total = int(round(seconds * sample_rate))
    degrees = np.array(sorted(template))
    out = np.zeros(total)
    pos = 0
    while pos < total:
        n = int(round(rng.uniform(NOTE_MIN_S, NOTE_MAX_S) * sample_rate))
        n = min(n, total - pos)
        step = int(rng.choice(degrees))
        out[pos : pos + n] = render_tone(tonic_hz * 2.0 ** (step / STEPS_PER_OCTAVE), n, sample_rate)
        pos += n
    noise_std = 10.0 ** (NOISE_DBFS / 20.0)
    out += rng.normal(0.0, noise_std, size=total)
    return np.clip(out, -1.0, 1.0)


def synth_dataset(out_dir: str | Path, spec: SynthSpec) -> Tuple[Path, List[RecordEntry]]:
    """Write one WAV per clip plus `manifest.csv`; identical specs give byte-identical files."""
    root = Path(out_dir)
    instruments = list(Instrument)
    entries: List[RecordEntry] = []
    for c in range(spec.n_classes):
        for i in range(spec.clips_per_class):
            rng = np.random.default_rng([spec.seed, c, i])
            tonic = spec.tonic_hz
            if spec.random_tonic:
                tonic *= 2.0 ** (int(rng.integers(0, STEPS_PER_OCTAVE)) / STEPS_PER_OCTAVE)
            samples = render_melody(TEMPLATES[c], spec.clip_seconds, rng, tonic)
            record_id = f"synth-c{c}-{i:03d}"
            path = write_wav(root / "audio" / f"{record_id}.wav", AudioClip(samples, PIPELINE_RATE))
            entries.append(
                RecordEntry(
                    record_id=record_id,
                    path=path,
                    dastgah=Dastgah(c),
                    instrument=instruments[i % len(instruments)],
                    artist="synthetic",
                )
            )
    manifest = write_manifest(entries, root / "manifest.csv")
    log.info("synth classes=%d per_class=%d seconds=%g out=%s", spec.n_classes, spec.clips_per_class, spec.clip_seconds, root)
    return manifest, entries
