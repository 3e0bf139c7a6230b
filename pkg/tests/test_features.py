import json
import os
from pathlib import Path

import numpy as np
import pytest

from dastgah.audio_io import AudioClip, write_wav
from dastgah.dataset import Dastgah, Instrument, RecordEntry
from dastgah.dsp import FeatureKind, StftConfig
from dastgah.features import (
    INDEX_NAME,
    FeatureCache,
    FeatureFileError,
    extract_features,
    read_feature_file,
    write_feature_file,
)


def _record(tmp_path: Path, rid: str, seconds: float, label: Dastgah, seed: int = 0) -> RecordEntry:
    rng = np.random.default_rng(seed)
    clip = AudioClip(rng.uniform(-0.3, 0.3, size=int(seconds * 22050)), 22050)
    path = write_wav(tmp_path / "audio" / f"{rid}.wav", clip)
    return RecordEntry(rid, path, label, Instrument.TAR, "test")


def test_feature_file_round_trip_is_bit_exact(tmp_path) -> None:
    values = np.random.default_rng(0).normal(size=(286, 24)).astype(np.float32)
    path = write_feature_file(tmp_path / "x.navf", values, FeatureKind.MFCC, 4)
    kind, label, back = read_feature_file(path)
    assert kind is FeatureKind.MFCC
    assert label == 4
    assert back.dtype == np.float32
    assert np.array_equal(back, values)
    raw = path.read_bytes()
    assert raw[:4] == b"NAVF"
    assert len(raw) == 20 + 286 * 24 * 4


def test_feature_file_errors(tmp_path) -> None:
    path = write_feature_file(tmp_path / "x.navf", np.zeros((3, 24), dtype=np.float32), FeatureKind.MFCC, 0)
    raw = path.read_bytes()

    (tmp_path / "short.navf").write_bytes(raw[:-4])
    with pytest.raises(FeatureFileError, match="expected"):
        read_feature_file(tmp_path / "short.navf")

    (tmp_path / "magic.navf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FeatureFileError, match="magic"):
        read_feature_file(tmp_path / "magic.navf")

    (tmp_path / "v2.navf").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FeatureFileError, match="version"):
        read_feature_file(tmp_path / "v2.navf")


def test_extract_one_minute_record(tmp_path) -> None:
    rec = _record(tmp_path, "r1", 60, Dastgah.SEGAH)
    cache = extract_features([rec], FeatureKind.MFCC, StftConfig(), tmp_path / "feat")
    assert len(cache) == 3
    for e in cache.entries:
        assert (e.rows, e.cols) == (286, 24)
        assert e.label == int(Dastgah.SEGAH)
        assert cache.read_matrix(e.segment_id).shape == (286, 24)

    index = json.loads((tmp_path / "feat" / INDEX_NAME).read_text())
    assert [i["segment_id"] for i in index] == sorted(i["segment_id"] for i in index)
    assert {"segment_id", "file", "record_id", "label", "kind", "rows", "cols"} <= set(index[0])

    reloaded = FeatureCache.load(tmp_path / "feat")
    X, y, ids = reloaded.arrays([e.segment_id for e in cache.entries])
    assert X.shape == (3, 286, 24)
    assert y.tolist() == [int(Dastgah.SEGAH)] * 3
    assert reloaded.kind is FeatureKind.MFCC
    assert reloaded.stft == StftConfig()


def test_extract_mel_dims(tmp_path) -> None:
    rec = _record(tmp_path, "r1", 21, Dastgah.SHUR)
    cache = extract_features([rec], FeatureKind.MEL, StftConfig(), tmp_path / "feat")
    assert [e.cols for e in cache.entries] == [128]


def test_empty_manifest_gives_empty_index(tmp_path) -> None:
    cache = extract_features([], FeatureKind.MFCC, StftConfig(), tmp_path / "feat")
    assert len(cache) == 0
    assert json.loads((tmp_path / "feat" / INDEX_NAME).read_text()) == []


def test_unreadable_record_is_recorded_and_skipped(tmp_path) -> None:
    good = _record(tmp_path, "good", 20, Dastgah.NAVA)
    bad_path = tmp_path / "audio" / "bad.wav"
    bad_path.write_bytes(b"not a wav file at all")
    bad = RecordEntry("bad", bad_path, Dastgah.SHUR, Instrument.SETAR, "x")
    missing = RecordEntry("missing", tmp_path / "nope.wav", Dastgah.SHUR, Instrument.SETAR, "x")

    cache = extract_features([good, bad, missing], FeatureKind.CHROMA_CENS, StftConfig(), tmp_path / "feat", n_jobs=2)
    assert [e.record_id for e in cache.entries] == ["good"]
    assert sorted(err["record_id"] for err in cache.errors) == ["bad", "missing"]
    assert FeatureCache.load(tmp_path / "feat").errors == cache.errors


def test_extraction_is_idempotent(tmp_path) -> None:
    rec = _record(tmp_path, "r1", 40, Dastgah.MAHUR)
    out = tmp_path / "feat"
    first = extract_features([rec], FeatureKind.MFCC, StftConfig(), out)
    stamps = {e.segment_id: (out / e.file).stat().st_mtime_ns for e in first.entries}

    rec.path.unlink()
    second = extract_features([rec], FeatureKind.MFCC, StftConfig(), out)
    assert [e.segment_id for e in second.entries] == [e.segment_id for e in first.entries]
    assert {e.segment_id: (out / e.file).stat().st_mtime_ns for e in second.entries} == stamps
    assert second.errors == []


def test_replaced_source_is_extracted_again(tmp_path) -> None:
    rec = _record(tmp_path, "r1", 20, Dastgah.NAVA, seed=1)
    out = tmp_path / "feat"
    first = extract_features([rec], FeatureKind.MFCC, StftConfig(), out)
    e = first.entries[0]
    assert e.source_size == rec.path.stat().st_size
    before = first.read_matrix(e.segment_id).copy()

    _record(tmp_path, "r1", 20, Dastgah.NAVA, seed=2)
    st = rec.path.stat()
    os.utime(rec.path, ns=(st.st_atime_ns, e.source_mtime_ns + 1_000_000_000))
    second = extract_features([rec], FeatureKind.MFCC, StftConfig(), out)
    assert rec.path.stat().st_size == e.source_size
    assert not np.array_equal(second.read_matrix(e.segment_id), before)
    assert second.entries[0].source_mtime_ns == e.source_mtime_ns + 1_000_000_000


def test_index_header_mismatch_is_detected(tmp_path) -> None:
    rec = _record(tmp_path, "r1", 20, Dastgah.SHUR)
    cache = extract_features([rec], FeatureKind.MFCC, StftConfig(), tmp_path / "feat")
    e = cache.entries[0]
    write_feature_file(tmp_path / "feat" / e.file, np.zeros((10, 24), dtype=np.float32), FeatureKind.MFCC, 0)
    with pytest.raises(FeatureFileError, match="disagrees"):
        FeatureCache.load(tmp_path / "feat").read_matrix(e.segment_id)


def test_class_counts_cover_every_dastgah(tmp_path) -> None:
    rec = _record(tmp_path, "r1", 40, Dastgah.HOMAYOUN)
    counts = extract_features([rec], FeatureKind.MFCC, StftConfig(), tmp_path / "feat").class_counts()
    assert counts["Homayoun"] == 2
    assert counts.sum() == 2
    assert list(counts.index) == [d.label for d in Dastgah]


def test_missing_index(tmp_path) -> None:
    with pytest.raises(FeatureFileError, match="index"):
        FeatureCache.load(tmp_path)
