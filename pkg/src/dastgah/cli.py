from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .audio_io import load_clip
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Dastgah, SplitSpec, load_manifest, segmentize, split, summarize_manifest
from .dsp import FeatureKind, StftConfig, extract
from .evaluation import confusion, instrument_breakdown, majority_vote, render, render_confusion, report
from .features import FeatureCache, extract_features
from .gradcheck import TOLERANCE, run_gradcheck
from .model import build_bilgnet
from .settings import ConfigError, config_keys, debug_enabled, load_config, load_environment, thread_count
from .synth import DEFAULT_TONIC_HZ, SynthSpec, synth_dataset
from .training import fit, predict

log = logging.getLogger("dastgah")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _configure_logging(debug: bool) -> None:
    logging.basicConfig(
        stream=sys.stderr,
        format="%(levelname)s: %(message)s",
        level=logging.DEBUG if debug else logging.INFO,
        force=True,
    )


def _config_overrides(args: argparse.Namespace) -> dict:
    return {
        "feature": getattr(args, "feature", None),
        "hop_length": getattr(args, "hop", None),
        "segment_seconds": getattr(args, "segment_seconds", None),
        "max_epochs": getattr(args, "epochs", None),
        "seed": getattr(args, "seed", None),
    }


def cmd_extract(args: argparse.Namespace) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        log.error("manifest not found: %s", manifest)
        return EXIT_USAGE
    cfg = load_config(args.config, _config_overrides(args))
    entries = load_manifest(manifest)
    cache = extract_features(entries, cfg.feature, cfg.stft, args.out, cfg.segment_seconds, n_jobs=thread_count())

    print(cache.class_counts().to_string())
    print(f"OK: {len(cache)} segments from {len(entries)} records -> {Path(args.out).resolve()}")
    if cache.errors:
        log.warning("%d record(s) failed extraction; see %s", len(cache.errors), Path(args.out) / "index.json")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        clips_per_class=args.per_class,
        clip_seconds=args.seconds,
        seed=args.seed,
        tonic_hz=args.tonic_hz,
        random_tonic=args.random_tonic,
    )
    manifest, entries = synth_dataset(args.out, spec)
    print(f"OK: {len(entries)} clips")
    print(f"manifest: {manifest.resolve()}")
    return EXIT_OK


def cmd_manifest(args: argparse.Namespace) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        log.error("manifest not found: %s", manifest)
        return EXIT_USAGE
    table = summarize_manifest(load_manifest(manifest))
    print(table.to_string())
    print(f"Total records: {int(table['Total'].sum())}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    cache = FeatureCache.load(args.features)
    if not len(cache):
        log.error("feature cache %s holds no segments", args.features)
        return EXIT_RUNTIME
    if cache.kind is not cfg.feature:
        log.error(
            "feature cache holds %s (%d dims), config expects %s (%d dims)",
            cache.kind.value,
            cache.dims,
            cfg.feature.value,
            cfg.model.input_dims,
        )
        return EXIT_RUNTIME
    splits = split(cache, cfg.split)
    log.info("split train=%d val=%d test=%d mode=%s", len(splits.train), len(splits.val), len(splits.test), cfg.split.mode)

    state = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model, state = ckpt.model, ckpt.state
    else:
        model = build_bilgnet(cfg.model, seed=cfg.train.seed)

    meta = cfg.to_dict()
    stft = cache.stft
    if stft is not None:
        meta.update(frame_length=stft.frame_length, hop_length=stft.hop_length)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".epochs.jsonl")

    def checkpoint_epoch(m, s) -> None:
        save_checkpoint(out, m, s, meta)

    state = fit(model, cache, splits, cfg.train, state=state, log_path=log_path, on_epoch=checkpoint_epoch)
    save_checkpoint(out, model, state, meta)

    if state.history:
        print(f"final val_accuracy: {state.history[-1].val_accuracy:.4f}")
    print(f"model: {out.resolve()}")
    print(f"epoch log: {log_path.resolve()}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.model)
    cache = FeatureCache.load(args.features)
    kind = FeatureKind.parse(ckpt.meta.get("feature", "mfcc"))
    if cache.kind is not kind:
        log.error("model was trained on %s features, cache holds %s", kind.value, cache.kind.value)
        return EXIT_RUNTIME
    if cache.dims != ckpt.model.cfg.input_dims:
        log.error("cache dims %d do not match model input_dims %d", cache.dims, ckpt.model.cfg.input_dims)
        return EXIT_RUNTIME

    spec = SplitSpec(
        train=ckpt.meta.get("train_fraction", 0.9),
        val=ckpt.meta.get("val_fraction", 0.05),
        test=ckpt.meta.get("test_fraction", 0.05),
        seed=ckpt.meta.get("seed", 0),
        mode=ckpt.meta.get("split_mode", "record"),
    )
    ids = split(cache, spec).get(args.split)
    if not ids:
        log.error("split %r is empty", args.split)
        return EXIT_RUNTIME

    X, y, ids = cache.arrays(ids)
    standardizer = ckpt.state.standardizer if ckpt.state is not None else None
    probs = predict(ckpt.model, X, standardizer=standardizer)
    pred = np.argmax(probs, axis=1)

    if args.per_record:
        records = [cache.entry(i).record_id for i in ids]
        frame = pd.DataFrame({"record_id": records, "label": y})
        rec_pred, rec_true = [], []
        for rows in frame.groupby("record_id", sort=True).groups.values():
            verdict, _, _ = majority_vote(probs[list(rows)])
            rec_pred.append(verdict)
            rec_true.append(int(y[rows[0]]))
        pred, y = np.array(rec_pred), np.array(rec_true)

    cm = confusion(pred, y)
    rep = report(cm)
    if args.report == "json":
        print(render(rep, "json"))
        return EXIT_OK
    print(render_confusion(cm))
    print()
    print(render(rep, "text"))
    if args.by_instrument and not args.per_record:
        print()
        print(instrument_breakdown(pred, y, [cache.entry(i).instrument for i in ids]).to_string())
    return EXIT_OK


def cmd_classify(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.model)
    meta = ckpt.meta
    kind = FeatureKind.parse(meta.get("feature", "mfcc"))
    stft = StftConfig(
        frame_length=int(meta.get("frame_length", 2048)),
        hop_length=int(meta.get("hop_length", 1536)),
        window=meta.get("window", "hann"),
    )
    clip = load_clip(args.wav)
    segments = segmentize(clip, Dastgah.SHUR, Path(args.wav).stem, float(meta.get("segment_seconds", 20.0)))
    if not segments:
        log.error("no full segment in %s (%.2f s)", args.wav, clip.duration_s)
        return EXIT_RUNTIME

    X = np.stack([extract(s.samples, kind, stft, clip.sample_rate).values for s in segments]).astype(np.float32)
    standardizer = ckpt.state.standardizer if ckpt.state is not None else None
    probs = predict(ckpt.model, X, standardizer=standardizer)

    names = [d.label for d in Dastgah]
    table = pd.DataFrame(probs, columns=names)
    table.insert(0, "offset_s", [s.offset_s for s in segments])
    table.insert(0, "segment", [s.segment_id for s in segments])
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))

    verdict, votes, mean = majority_vote(probs)
    print(f"verdict: {Dastgah(verdict).label} (votes {int(votes[verdict])}/{len(segments)}, mean p={mean[verdict]:.4f})")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradcheck(seed=args.seed)
    failed = 0
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        failed += status == "FAIL"
        print(f"{name:<24} {err:.3e} {status}")
    if failed:
        log.error("%d gradient check(s) above %.0e", failed, TOLERANCE)
        return EXIT_RUNTIME
    return EXIT_OK


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k} = {v}" for k, v in config_keys())
    parser = argparse.ArgumentParser(
        prog="dastgah",
        description="Dastgah classification: feature extraction, BiLGNet training and evaluation.",
        formatter_class=_HelpFormatter,
    )
    parser.add_argument("--debug", action="store_true", help="debug logging (also env DEBUG=1)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(
            name,
            help=help_text,
            formatter_class=_HelpFormatter,
            epilog=f"config keys and defaults:\n{keys}" if name in ("extract", "train") else None,
        )

    p = add("extract", "decode, segment and featurize a manifest into a feature cache")
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--feature", choices=["mfcc", "chroma-cens", "mel"], default=None, help="feature kind (config: feature)")
    p.add_argument("--out", required=True, help="feature cache directory")
    p.add_argument("--hop", type=int, default=None, help="STFT hop length in samples (config: hop_length)")
    p.add_argument("--segment-seconds", type=float, default=None, help="segment length (config: segment_seconds)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.set_defaults(func=cmd_extract)

    p = add("synth", "write a synthetic quartertone-scale dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, default=30, help="clips per class")
    p.add_argument("--seconds", type=float, default=60.0, help="clip length in seconds")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--tonic-hz", type=float, default=DEFAULT_TONIC_HZ, help="tonic frequency")
    p.add_argument("--random-tonic", action="store_true", help="transpose every clip by a random quartertone count")
    p.set_defaults(func=cmd_synth)

    p = add("manifest", "summarize a manifest as dastgah x instrument counts")
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.set_defaults(func=cmd_manifest)

    p = add("train", "split a feature cache and train BiLGNet")
    p.add_argument("--features", required=True, help="feature cache directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=None, help="override max_epochs")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--log", default=None, help="JSON-lines epoch log (default: <out>.epochs.jsonl)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = add("evaluate", "confusion matrix and classification report for a split")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--features", required=True, help="feature cache directory")
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test", help="split to evaluate")
    p.add_argument("--report", choices=["text", "json"], default="text", help="report format")
    p.add_argument("--per-record", action="store_true", help="majority vote per record instead of per segment")
    p.add_argument("--by-instrument", action="store_true", help="append per-instrument accuracy")
    p.set_defaults(func=cmd_evaluate)

    p = add("classify", "classify one WAV file by segment and majority vote")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("wav", help="WAV file")
    p.set_defaults(func=cmd_classify)

    p = add("gradcheck", "compare analytic gradients with finite differences")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_environment()
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as exc:
        return int(exc.code or 0)

    debug = args.debug or debug_enabled()
    _configure_logging(debug)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (RuntimeError, ValueError, OSError) as exc:
        log.error("%s", exc)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
