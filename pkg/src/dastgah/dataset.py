from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, List, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from .audio_io import PIPELINE_RATE, AudioClip

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["record_id", "path", "dastgah", "instrument", "artist"]
SEGMENT_SECONDS = 20.0


class ManifestError(ValueError):
    pass


class Dastgah(IntEnum):
    SHUR = 0
    MAHUR = 1
    CHAHARGAH = 2
    HOMAYOUN = 3
    SEGAH = 4
    NAVA = 5
    RASTPANJGAH = 6

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value: str) -> "Dastgah":
        cleaned = (value or "").strip().upper()
        try:
            return cls[cleaned]
        except KeyError:
            raise ValueError(f"unknown dastgah {value!r}") from None


class Instrument(str, Enum):
    KAMANCHEH = "Kamancheh"
    TAR = "Tar"
    SETAR = "Setar"
    REED = "Reed"
    DULCIMER = "Dulcimer"

    @classmethod
    def parse(cls, value: str) -> "Instrument":
        cleaned = (value or "").strip().lower()
        cleaned = _INSTRUMENT_ALIASES.get(cleaned, cleaned)
        for inst in cls:
            if inst.value.lower() == cleaned:
                return inst
        raise ValueError(f"unknown instrument {value!r}")


_INSTRUMENT_ALIASES = {"kamanche": "kamancheh", "ney": "reed", "santur": "dulcimer"}

# Pieces per Dastgah and instrument in the Nava corpus (1786 records in total).
NAVA_RECORD_COUNTS: dict[Dastgah, dict[Instrument, int]] = {
    Dastgah.SHUR: {Instrument.DULCIMER: 88, Instrument.REED: 47, Instrument.SETAR: 53, Instrument.TAR: 57, Instrument.KAMANCHEH: 34},
    Dastgah.MAHUR: {Instrument.DULCIMER: 50, Instrument.REED: 48, Instrument.SETAR: 82, Instrument.TAR: 42, Instrument.KAMANCHEH: 50},
    Dastgah.CHAHARGAH: {Instrument.DULCIMER: 71, Instrument.REED: 57, Instrument.SETAR: 67, Instrument.TAR: 42, Instrument.KAMANCHEH: 34},
    Dastgah.HOMAYOUN: {Instrument.DULCIMER: 65, Instrument.REED: 69, Instrument.SETAR: 41, Instrument.TAR: 50, Instrument.KAMANCHEH: 28},
    Dastgah.SEGAH: {Instrument.DULCIMER: 73, Instrument.REED: 50, Instrument.SETAR: 39, Instrument.TAR: 67, Instrument.KAMANCHEH: 23},
    Dastgah.NAVA: {Instrument.DULCIMER: 53, Instrument.REED: 57, Instrument.SETAR: 40, Instrument.TAR: 51, Instrument.KAMANCHEH: 41},
    Dastgah.RASTPANJGAH: {Instrument.DULCIMER: 38, Instrument.REED: 66, Instrument.SETAR: 42, Instrument.TAR: 39, Instrument.KAMANCHEH: 32},
}

_SUMMARY_INSTRUMENTS = [Instrument.DULCIMER, Instrument.REED, Instrument.SETAR, Instrument.TAR, Instrument.KAMANCHEH]


@dataclass(frozen=True)
class RecordEntry:
    record_id: str
    path: Path
    dastgah: Dastgah
    instrument: Instrument
    artist: str


@dataclass(frozen=True, eq=False)
class Segment:
    segment_id: str
    record_id: str
    offset_s: float
    samples: np.ndarray
    label: Dastgah


def load_manifest(path: str | Path) -> List[RecordEntry]:
    """Parse a manifest CSV; relative audio paths resolve against the manifest's directory."""
    p = Path(path)
    df = pd.read_csv(p, dtype=str, keep_default_na=False, encoding="utf-8")
    if list(df.columns) != MANIFEST_COLUMNS:
        raise ManifestError(f"{p}: header must be {','.join(MANIFEST_COLUMNS)}, got {','.join(df.columns)}")

    entries: List[RecordEntry] = []
    seen: set[str] = set()
    for i, row in enumerate(df.itertuples(index=False), start=2):
        record_id = row.record_id.strip()
        if not record_id:
            raise ManifestError(f"{p}: row {i}: empty record_id")
        if record_id in seen:
            raise ManifestError(f"{p}: row {i}: duplicate record_id {record_id!r}")
        try:
            dastgah = Dastgah.parse(row.dastgah)
            instrument = Instrument.parse(row.instrument)
        except ValueError as exc:
            raise ManifestError(f"{p}: row {i}: {exc}") from None
        audio_path = Path(row.path.strip())
        if not audio_path.is_absolute():
            audio_path = p.parent / audio_path
        seen.add(record_id)
        entries.append(RecordEntry(record_id, audio_path, dastgah, instrument, row.artist.strip()))
    return entries


def write_manifest(entries: Iterable[RecordEntry], path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for e in entries:
        try:
            rel = e.path.relative_to(p.parent)
        except ValueError:
            rel = e.path
        rows.append([e.record_id, rel.as_posix(), e.dastgah.label, e.instrument.value, e.artist])
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(p, index=False, lineterminator="\n", encoding="utf-8")
    return p


def summarize_manifest(entries: Sequence[RecordEntry]) -> pd.DataFrame:
    """Dastgah x instrument record counts with a Total column."""
    frame = pd.DataFrame(
        {
            "dastgah": [e.dastgah.label for e in entries],
            "instrument": [e.instrument.value for e in entries],
        }
    )
    rows = [d.label for d in Dastgah]
    cols = [i.value for i in _SUMMARY_INSTRUMENTS]
    table = pd.crosstab(frame["dastgah"], frame["instrument"]) if len(frame) else pd.DataFrame()
    table = table.reindex(index=rows, columns=cols, fill_value=0).fillna(0).astype(int)
    table["Total"] = table.sum(axis=1)
    table.index.name = "dastgah"
    table.columns.name = None
    return table


def segment_length(segment_seconds: float = SEGMENT_SECONDS, sample_rate: int = PIPELINE_RATE) -> int:
    return int(round(segment_seconds * sample_rate))


def segmentize(
    clip: AudioClip,
    label: Dastgah,
    record_id: str = "",
    segment_seconds: float = SEGMENT_SECONDS,
) -> List[Segment]:
    """Non-overlapping fixed-length windows from offset 0; the remainder is dropped."""
    if clip.sample_rate != PIPELINE_RATE:
        raise ValueError(f"segmentize needs {PIPELINE_RATE} Hz audio, got {clip.sample_rate} Hz")
    seg_len = segment_length(segment_seconds, clip.sample_rate)
    count = len(clip.samples) // seg_len
    if count == 0:
        log.warning(
            "record=%s shorter than one %.0f s segment (%.2f s); no segments",
            record_id or "?",
            segment_seconds,
            clip.duration_s,
        )
        return []
    out = []
    for i in range(count):
        start = i * seg_len
        out.append(
            Segment(
                segment_id=f"{record_id}-{i:04d}",
                record_id=record_id,
                offset_s=start / clip.sample_rate,
                samples=clip.samples[start : start + seg_len],
                label=Dastgah(label),
            )
        )
    return out


class _Labelled(Protocol):
    segment_id: str
    record_id: str
    label: int


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.90
    val: float = 0.05
    test: float = 0.05
    seed: int = 0
    mode: str = "record"

    def __post_init__(self) -> None:
        for name in ("train", "val", "test"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"split fraction {name}={v} outside [0, 1]")
        if not math.isclose(self.train + self.val + self.test, 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must sum to 1, got {self.train + self.val + self.test}")
        if self.mode not in ("record", "segment"):
            raise ValueError(f"split mode must be 'record' or 'segment', got {self.mode!r}")


@dataclass(frozen=True)
class Splits:
    train: List[str]
    val: List[str]
    test: List[str]

    def get(self, name: str) -> List[str]:
        if name == "all":
            return sorted(self.train + self.val + self.test)
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _allocate(n: int, spec: SplitSpec) -> Tuple[int, int]:
    n_test = _round_half_up(n * spec.test)
    n_val = _round_half_up(n * spec.val)
    if n >= 3:
        if spec.test > 0:
            n_test = max(n_test, 1)
        if spec.val > 0:
            n_val = max(n_val, 1)
    n_test = min(n_test, n)
    n_val = min(n_val, n - n_test)
    return n_val, n_test


def split(cache, spec: SplitSpec) -> Splits:
    """Stratified, seeded partition of segment ids into train/val/test.

    `cache` is a FeatureCache or any sequence of entries with segment_id, record_id and label.
    """
    entries: Sequence[_Labelled] = list(getattr(cache, "entries", cache))
    if not entries:
        raise ValueError("cannot split an empty cache")

    rng = np.random.default_rng(spec.seed)
    train: List[str] = []
    val: List[str] = []
    test: List[str] = []

    for code in sorted({int(e.label) for e in entries}):
        members = [e for e in entries if int(e.label) == code]
        if spec.mode == "record":
            units = sorted({e.record_id for e in members})
        else:
            units = sorted(e.segment_id for e in members)
        n_val, n_test = _allocate(len(units), spec)
        if spec.mode == "record" and len(units) < 3:
            log.warning("class=%s has %d records; it may be missing from a split", Dastgah(code).label, len(units))

        order = rng.permutation(len(units))
        shuffled = [units[i] for i in order]
        test_units = set(shuffled[:n_test])
        val_units = set(shuffled[n_test : n_test + n_val])

        for e in members:
            key = e.record_id if spec.mode == "record" else e.segment_id
            if key in test_units:
                test.append(e.segment_id)
            elif key in val_units:
                val.append(e.segment_id)
            else:
                train.append(e.segment_id)

    return Splits(train=sorted(train), val=sorted(val), test=sorted(test))
