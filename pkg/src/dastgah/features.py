from __future__ import annotations

import logging
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .audio_io import UnsupportedFormatError, WavDecodeError, load_clip
from .dataset import SEGMENT_SECONDS, Dastgah, RecordEntry, load_manifest, segment_length, segmentize
from .dsp import FeatureKind, SignalTooShortError, StftConfig, extract
from .output import ensure_dir, read_json, write_json

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"NAVF"
FEATURE_VERSION = 1
FEATURE_SUFFIX = ".navf"
INDEX_NAME = "index.json"

# magic, version, kind, label, reserved, rows, cols
_HEADER = struct.Struct("<4sIBBHII")


class FeatureFileError(RuntimeError):
    pass


def write_feature_file(path: str | Path, values: np.ndarray, kind: FeatureKind, label: int) -> Path:
    data = np.ascontiguousarray(values, dtype="<f4")
    if data.ndim != 2:
        raise FeatureFileError(f"{path}: feature matrix must be 2-D, got shape {data.shape}")
    rows, cols = data.shape
    p = Path(path)
    ensure_dir(p.parent)
    with open(p, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, kind.code, int(label), 0, rows, cols))
        f.write(data.tobytes())
    return p


def read_feature_file(path: str | Path) -> Tuple[FeatureKind, int, np.ndarray]:
    """Returns (kind, label code, rows x cols float32 matrix)."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"{p}: {exc.strerror or exc}") from exc
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{p}: truncated header ({len(raw)} bytes)")
    magic, version, kind_code, label, _, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{p}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{p}: unsupported version {version} (reader is {FEATURE_VERSION})")
    try:
        kind = FeatureKind.from_code(kind_code)
    except ValueError as exc:
        raise FeatureFileError(f"{p}: {exc}") from None
    expected = _HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise FeatureFileError(f"{p}: expected {expected} bytes for {rows}x{cols}, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float32)
    return kind, int(label), values


@dataclass(frozen=True)
class CacheEntry:
    segment_id: str
    file: str
    record_id: str
    label: int
    kind: str
    rows: int
    cols: int
    instrument: str = ""
    frame_length: int = 0
    hop_length: int = 0
    source_size: int = 0
    source_mtime_ns: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "CacheEntry":
        return cls(
            segment_id=str(raw["segment_id"]),
            file=str(raw["file"]),
            record_id=str(raw["record_id"]),
            label=int(raw["label"]),
            kind=str(raw["kind"]),
            rows=int(raw["rows"]),
            cols=int(raw["cols"]),
            instrument=str(raw.get("instrument") or ""),
            frame_length=int(raw.get("frame_length") or 0),
            hop_length=int(raw.get("hop_length") or 0),
            source_size=int(raw.get("source_size") or 0),
            source_mtime_ns=int(raw.get("source_mtime_ns") or 0),
        )


class FeatureCache:
    """A directory of per-segment feature files plus the JSON index describing them."""

    def __init__(self, root: str | Path, entries: Sequence[CacheEntry], errors: Sequence[dict] = ()) -> None:
        self.root = Path(root)
        self.entries: List[CacheEntry] = sorted(entries, key=lambda e: e.segment_id)
        self.errors: List[dict] = list(errors)
        self._by_id: Dict[str, CacheEntry] = {}
        for e in self.entries:
            if e.segment_id in self._by_id:
                raise FeatureFileError(f"{self.root / INDEX_NAME}: duplicate segment_id {e.segment_id!r}")
            self._by_id[e.segment_id] = e

    @classmethod
    def load(cls, root: str | Path) -> "FeatureCache":
        root = Path(root)
        index_path = root / INDEX_NAME
        if not index_path.exists():
            raise FeatureFileError(f"{index_path}: no feature index (run `dastgah extract` first)")
        raw = read_json(index_path)
        if not isinstance(raw, list):
            raise FeatureFileError(f"{index_path}: index must be a JSON array")
        entries: List[CacheEntry] = []
        errors: List[dict] = []
        for item in raw:
            if item.get("error"):
                errors.append(item)
                continue
            try:
                entries.append(CacheEntry.from_dict(item))
            except (KeyError, TypeError, ValueError) as exc:
                raise FeatureFileError(f"{index_path}: malformed entry {item!r}: {exc}") from None
        return cls(root, entries, errors)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, segment_id: str) -> bool:
        return segment_id in self._by_id

    def entry(self, segment_id: str) -> CacheEntry:
        try:
            return self._by_id[segment_id]
        except KeyError:
            raise FeatureFileError(f"segment {segment_id!r} not in cache {self.root}") from None

    @property
    def kind(self) -> FeatureKind:
        kinds = {e.kind for e in self.entries}
        if len(kinds) != 1:
            raise FeatureFileError(f"{self.root}: cache holds {len(kinds)} feature kinds, expected one")
        return FeatureKind(kinds.pop())

    @property
    def dims(self) -> int:
        cols = {e.cols for e in self.entries}
        if len(cols) != 1:
            raise FeatureFileError(f"{self.root}: inconsistent feature dims {sorted(cols)}")
        return cols.pop()

    @property
    def stft(self) -> Optional[StftConfig]:
        if not self.entries or not self.entries[0].frame_length:
            return None
        e = self.entries[0]
        return StftConfig(frame_length=e.frame_length, hop_length=e.hop_length)

    def read_matrix(self, segment_id: str) -> np.ndarray:
        e = self.entry(segment_id)
        kind, label, values = read_feature_file(self.root / e.file)
        if kind.value != e.kind or label != e.label or values.shape != (e.rows, e.cols):
            raise FeatureFileError(
                f"{self.root / e.file}: header ({kind.value}, label {label}, {values.shape[0]}x{values.shape[1]}) "
                f"disagrees with index ({e.kind}, label {e.label}, {e.rows}x{e.cols})"
            )
        return values

    def arrays(self, segment_ids: Iterable[str]) -> Tuple[np.ndarray, np.ndarray, List[str]]:
        """Stack matrices into (X: n x T x d float32, y: n int64, ids) in the given order."""
        ids = list(segment_ids)
        if not ids:
            return np.zeros((0, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64), []
        shapes = {(self.entry(i).rows, self.entry(i).cols) for i in ids}
        if len(shapes) != 1:
            raise FeatureFileError(f"{self.root}: segments have differing shapes {sorted(shapes)}")
        rows, cols = shapes.pop()
        X = np.empty((len(ids), rows, cols), dtype=np.float32)
        for n, sid in enumerate(ids):
            X[n] = self.read_matrix(sid)
        y = np.array([self.entry(i).label for i in ids], dtype=np.int64)
        return X, y, ids

    def class_counts(self) -> pd.Series:
        labels = pd.Series([Dastgah(e.label).label for e in self.entries], dtype=object)
        counts = labels.value_counts().reindex([d.label for d in Dastgah], fill_value=0)
        counts.name = "segments"
        return counts


def _entry_files_match(root: Path, entries: Sequence[CacheEntry]) -> bool:
    for e in entries:
        p = root / e.file
        if not p.exists() or p.stat().st_size != _HEADER.size + e.rows * e.cols * 4:
            return False
        with open(p, "rb") as f:
            head = f.read(_HEADER.size)
        magic, version, kind_code, label, _, rows, cols = _HEADER.unpack(head)
        if (magic, version, label, rows, cols) != (FEATURE_MAGIC, FEATURE_VERSION, e.label, e.rows, e.cols):
            return False
        if kind_code != FeatureKind(e.kind).code:
            return False
    return True


def _segment_file(segment_id: str) -> str:
    return f"segments/{segment_id}{FEATURE_SUFFIX}"


def _source_stamp(path: Path) -> Tuple[int, int]:
    st = os.stat(path)
    return st.st_size, st.st_mtime_ns


def _extract_record(
    record: RecordEntry,
    kind: FeatureKind,
    cfg: StftConfig,
    root: Path,
    segment_seconds: float,
    previous: Sequence[CacheEntry],
) -> List[dict]:
    try:
        stamp: Optional[Tuple[int, int]] = _source_stamp(record.path)
    except OSError:
        # source gone: indexed segments stand on their own
        stamp = None
    if (
        previous
        and all(e.label == int(record.dastgah) for e in previous)
        and (stamp is None or all((e.source_size, e.source_mtime_ns) == stamp for e in previous))
        and _entry_files_match(root, previous)
    ):
        log.debug("extract record=%s reused=%d", record.record_id, len(previous))
        return [asdict(e) for e in previous]

    try:
        clip = load_clip(record.path)
        size, mtime_ns = stamp or _source_stamp(record.path)
        segments = segmentize(clip, record.dastgah, record.record_id, segment_seconds)
        out = []
        for seg in segments:
            matrix = extract(seg.samples, kind, cfg, sample_rate=clip.sample_rate)
            rel = _segment_file(seg.segment_id)
            write_feature_file(root / rel, matrix.values, kind, int(seg.label))
            out.append(
                asdict(
                    CacheEntry(
                        segment_id=seg.segment_id,
                        file=rel,
                        record_id=record.record_id,
                        label=int(seg.label),
                        kind=kind.value,
                        rows=matrix.frames,
                        cols=matrix.dims,
                        instrument=record.instrument.value,
                        frame_length=cfg.frame_length,
                        hop_length=cfg.hop_length,
                        source_size=size,
                        source_mtime_ns=mtime_ns,
                    )
                )
            )
    except (OSError, WavDecodeError, UnsupportedFormatError, SignalTooShortError, ValueError) as exc:
        log.warning("extract record=%s failed: %s", record.record_id, exc)
        return [{"segment_id": None, "record_id": record.record_id, "path": str(record.path), "error": str(exc)}]
    log.debug("extract record=%s segments=%d", record.record_id, len(out))
    return out


def extract_features(
    manifest: str | Path | Sequence[RecordEntry],
    kind: FeatureKind,
    cfg: StftConfig,
    out_dir: str | Path,
    segment_seconds: float = SEGMENT_SECONDS,
    n_jobs: int = 1,
) -> FeatureCache:
    """Decode, resample, segment and featurize every manifest record into `out_dir`.

    Records whose indexed files already match are reused untouched. A record that
    cannot be read leaves an error entry in the index and extraction moves on.
    """
    records = load_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    root = Path(out_dir)
    ensure_dir(root)

    previous: Dict[str, List[CacheEntry]] = {}
    if (root / INDEX_NAME).exists():
        try:
            old = FeatureCache.load(root)
        except FeatureFileError as exc:
            log.warning("ignoring unreadable index %s: %s", root / INDEX_NAME, exc)
        else:
            rows = cfg.frame_count(segment_length(segment_seconds))
            for e in old.entries:
                if e.kind == kind.value and e.rows == rows and (e.frame_length, e.hop_length) == (cfg.frame_length, cfg.hop_length):
                    previous.setdefault(e.record_id, []).append(e)

    results = Parallel(n_jobs=max(1, int(n_jobs)), prefer="threads")(
        delayed(_extract_record)(r, kind, cfg, root, segment_seconds, previous.get(r.record_id, []))
        for r in records
    )

    items = [item for chunk in results for item in chunk]
    good = sorted((i for i in items if not i.get("error")), key=lambda i: i["segment_id"])
    bad = sorted((i for i in items if i.get("error")), key=lambda i: i["record_id"])
    write_json(root / INDEX_NAME, good + bad)
    log.info(
        "extract records=%d segments=%d failed=%d kind=%s out=%s",
        len(records),
        len(good),
        len(bad),
        kind.value,
        root,
    )
    return FeatureCache(root, [CacheEntry.from_dict(i) for i in good], bad)
