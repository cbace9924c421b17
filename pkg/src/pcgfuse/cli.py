"""Command-line entry point: ``pcgfuse simulate|extract|train|evaluate|compare``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
Logs go to standard error; results go to files (``compare`` prints its
verdict to standard output).

Configuration is a JSON file; command-line flags override it. Keys::

    {"features": "Fbank&MFCC13",
     "train": {<TrainConfig fields>},
     "feature": {"num_filters": 26, ..., "frame": {<FrameSpec fields>}},
     "paths": {"manifest": ..., "cache": ..., "checkpoint": ..., "report": ...}}

The feature cache lives under ``--cache``, else ``$PCGFUSE_CACHE``, else
``<manifest dir>/cache``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import Manifest, ManifestError, ManifestRow, parse_snr, physionet_manifest, read_manifest, simulate_corpus
from .distortion import CHANNEL_PRESETS, parse_channel
from .dsp import FrameSpec
from .evaluation import EvalReport, compare_reports, read_report
from .features import FeatureConfig, extract_fused, kind_tag, parse_kinds
from .formats import FormatError, _atomic_write, read_checkpoint, read_features, write_checkpoint, write_features
from .pipeline import evaluate_recordings, segment_recording
from .preprocess import UnsegmentableRecording, read_onsets, read_wav
from .training import SegmentSet, TrainConfig, TrainingDiverged, fit

log = logging.getLogger("pcgfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
CACHE_ENV = "PCGFUSE_CACHE"
SEGMENT_DIR = "segments"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ config


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _pick(section: dict, cls, what: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise UsageError(f"unknown {what} keys in config: {unknown}")
    return dict(section)


def feature_config(cfg: dict) -> FeatureConfig:
    section = dict(cfg.get("feature", {}))
    frame = FrameSpec(**_pick(section.pop("frame", {}), FrameSpec, "frame"))
    return FeatureConfig(frame=frame, **_pick(section, FeatureConfig, "feature"))


def train_config(cfg: dict, args) -> TrainConfig:
    section = _pick(cfg.get("train", {}), TrainConfig, "train")
    for name in ("epochs", "batch_size", "seed"):
        val = getattr(args, name, None)
        if val is not None:
            section[name] = val
    try:
        return TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def _path(args, cfg, key, flag=None):
    val = getattr(args, flag or key, None)
    if val is None:
        val = cfg.get("paths", {}).get(key)
    return Path(val) if val is not None else None


def _manifest(args, cfg) -> Manifest:
    path = _path(args, cfg, "manifest")
    if path is None:
        raise UsageError("--manifest is required")
    try:
        return read_manifest(path)
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}") from exc


def cache_root(args, cfg, manifest: Manifest) -> Path:
    val = _path(args, cfg, "cache")
    if val is not None:
        return val
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    return manifest.root / "cache"


def feature_dir_name(kinds, feat_cfg: FeatureConfig) -> str:
    blob = json.dumps(asdict(feat_cfg), sort_keys=True).encode()
    return f"{kind_tag(kinds).replace('&', '+')}-{hashlib.sha256(blob).hexdigest()[:10]}"


# ------------------------------------------------------------------ simulate


def cmd_simulate(args, cfg) -> int:
    out = args.out
    if out is None:
        raise UsageError("--out DIR is required")
    channels = args.channels.split(",")
    for ch in channels:
        try:
            parse_channel(ch)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    try:
        snrs = [parse_snr(s) for s in args.snrs.split(",")]
    except ValueError as exc:
        raise UsageError(f"invalid --snrs: {exc}") from exc
    try:
        manifest = simulate_corpus(out, channels, snrs, args.seed or 0, per_cell=args.per_cell,
                                   test_fraction=args.test_fraction, duration_s=args.duration)
    except OSError as exc:
        raise DataError(f"cannot write corpus: {exc}") from exc
    log.info("wrote %s", manifest)
    return EXIT_OK


# ------------------------------------------------------------------ extract


def _source_digest(row: ManifestRow, manifest: Manifest, tag: str) -> str:
    h = hashlib.sha256(tag.encode())
    h.update(manifest.resolve(row.path).read_bytes())
    if row.onsets:
        h.update(manifest.resolve(row.onsets).read_bytes())
    return h.hexdigest()


def _extract_one(job) -> tuple[str, int, int, str | None]:
    """Returns (record key, segments, files written, error message)."""
    row, root, feat_root, seg_root, kinds, feat_cfg, tag = job
    manifest = Manifest([], root)
    marker = feat_root / f"{row.key}.json"
    try:
        digest = _source_digest(row, manifest, tag)
        if marker.exists():
            info = json.loads(marker.read_text())
            if info.get("digest") == digest and all(
                (feat_root / f"{row.key}__c{i:03d}.pcgf").exists() for i in range(info["n_segments"])
            ):
                return row.key, info["n_segments"], 0, None
        samples, fs = read_wav(manifest.resolve(row.path))
        onsets = read_onsets(manifest.resolve(row.onsets)) if row.onsets else None
        segs = segment_recording(samples, fs, onsets, row.key)
    except (OSError, ValueError) as exc:  # includes UnsegmentableRecording
        return row.key, 0, 0, str(exc)
    for i, seg in enumerate(segs):
        name = f"{row.key}__c{i:03d}.pcgf"
        write_features(seg_root / name, seg.samples[None], "wave")
        write_features(feat_root / name, extract_fused(seg.samples, kinds, feat_cfg), kind_tag(kinds))
    _atomic_write(marker, (json.dumps({"digest": digest, "n_segments": len(segs)}, sort_keys=True) + "\n").encode())
    return row.key, len(segs), len(segs), None


def cmd_extract(args, cfg) -> int:
    manifest = _manifest(args, cfg)
    kinds = _kinds(args, cfg)
    feat_cfg = feature_config(cfg)
    root = cache_root(args, cfg, manifest)
    feat_root = root / feature_dir_name(kinds, feat_cfg)
    seg_root = root / SEGMENT_DIR
    feat_root.mkdir(parents=True, exist_ok=True)
    seg_root.mkdir(parents=True, exist_ok=True)
    tag = json.dumps({"kinds": kind_tag(kinds), "feature": asdict(feat_cfg)}, sort_keys=True)
    jobs = [(row, manifest.root, feat_root, seg_root, kinds, feat_cfg, tag) for row in manifest.rows]
    workers = 1 if args.deterministic else max(1, args.workers)
    if workers == 1:
        results = [_extract_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_extract_one, jobs))
    failed = 0
    total = written = 0
    for key, n, w, err in results:
        if err is not None:
            failed += 1
            log.warning("skipped %s: %s", key, err)
            continue
        log.info("%s: %d segments (%d written)", key, n, w)
        total += n
        written += w
    log.info("extract: %d recordings, %d segments, %d files written, %d skipped -> %s",
             len(results) - failed, total, written, failed, feat_root)
    return EXIT_DATA if failed else EXIT_OK


def _kinds(args, cfg):
    text = getattr(args, "features", None) or cfg.get("features") or "Fbank&MFCC13"
    try:
        return parse_kinds(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cached_keys(root: Path, row: ManifestRow) -> list[str]:
    marker = root / f"{row.key}.json"
    if not marker.exists():
        raise DataError(f"no cached segments for {row.path} under {root}; run `pcgfuse extract` first")
    n = json.loads(marker.read_text())["n_segments"]
    return [f"{row.key}__c{i:03d}.pcgf" for i in range(n)]


# ------------------------------------------------------------------ train


def cmd_train(args, cfg) -> int:
    manifest = _manifest(args, cfg)
    kinds = _kinds(args, cfg)
    feat_cfg = feature_config(cfg)
    tcfg = train_config(cfg, args)
    out = _path(args, cfg, "checkpoint", "out")
    if out is None:
        raise UsageError("--out CHECKPOINT is required")
    root = cache_root(args, cfg, manifest)
    feat_root = root / feature_dir_name(kinds, feat_cfg)
    rows = manifest.split("train")
    if not rows:
        raise DataError("manifest has no train split")
    samples, labels, domains = [], [], []
    for row in rows:
        for name in _cached_keys(feat_root, row):
            path = root / SEGMENT_DIR / name
            if not path.exists():
                raise DataError(f"missing cached segment {path}; run `pcgfuse extract` first")
            wave, _ = read_features(path)
            samples.append(wave[0].astype(np.float64))
            labels.append(row.label_index)
            domains.append(row.domain)
    log.info("training %s on %d segments from %d recordings", kind_tag(kinds), len(samples), len(rows))
    log_path = out.with_suffix(".log.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as fh:
        def on_record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        result = fit(SegmentSet(np.array(samples), np.array(labels), np.array(domains)), kinds, tcfg, feat_cfg,
                     on_record=on_record)
    write_checkpoint(out, result.params)
    meta = {"features": kind_tag(kinds), "feature": asdict(feat_cfg), "train": asdict(tcfg),
            "best_epoch": result.best_epoch, "version": __version__}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("checkpoint %s (best epoch %s), log %s", out, result.best_epoch, log_path)
    return EXIT_OK


# ------------------------------------------------------------------ evaluate


def cmd_evaluate(args, cfg) -> int:
    manifest = _manifest(args, cfg)
    ckpt = _path(args, cfg, "checkpoint")
    if ckpt is None:
        raise UsageError("--checkpoint is required")
    meta_path = ckpt.with_suffix(".json")
    if not (getattr(args, "features", None) or cfg.get("features")) and meta_path.exists():
        cfg = {**cfg, "features": json.loads(meta_path.read_text())["features"]}
    kinds = _kinds(args, cfg)
    feat_cfg = feature_config(cfg)
    out = _path(args, cfg, "report", "out")
    if out is None:
        raise UsageError("--out REPORT is required")
    try:
        params = read_checkpoint(ckpt)
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    rows = manifest.split("test")
    if not rows:
        raise DataError("manifest has no test split")
    feat_root = cache_root(args, cfg, manifest) / feature_dir_name(kinds, feat_cfg)
    items = []
    for row in rows:
        names = _cached_keys(feat_root, row)
        if not names:
            log.warning("%s has no segments; skipped", row.path)
            continue
        feats = np.stack([read_features(feat_root / n)[0][None] for n in names])
        items.append((row.key, row.domain, row.label_index, feats))
    try:
        report = EvalReport.from_recordings(evaluate_recordings(params, items))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    txt, jsonl = report.write(out)
    log.info("report %s, %s", txt, jsonl)
    return EXIT_OK


# ------------------------------------------------------------------ compare


def cmd_compare(args, cfg) -> int:
    try:
        a, b = read_report(args.report_a), read_report(args.report_b)
        result = compare_reports(a, b, args.alpha)
    except OSError as exc:
        raise DataError(f"cannot read report: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(result)
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"b": result.b, "c": result.c, "chi2": result.chi2, "p_value": result.p_value,
             "exact_p": result.exact_p, "significant": result.significant}, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_physionet(args, cfg) -> int:
    out = args.out or Path(args.root) / "manifest.csv"
    rows = physionet_manifest(args.root, args.test_list, out)
    if not rows:
        raise DataError(f"no training-* folders with REFERENCE.csv under {args.root}")
    log.info("wrote %d rows to %s", len(rows), out)
    return EXIT_OK


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--manifest", help="CSV manifest (path,label,domain,split,patient_id,...)")
    common.add_argument("--config", help="JSON configuration; flags override it")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true", help="single worker, reproducible outputs")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", type=Path, default=None)
    common.add_argument("--cache", default=None, help=f"cache root (default ${CACHE_ENV} or <manifest dir>/cache)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="pcgfuse", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic corpus and manifest")
    s.add_argument("--per-cell", type=int, default=10, help="recordings per (class, channel) cell")
    s.add_argument("--channels", default="identity,lowpass_tilt",
                   help=f"comma list of {sorted(CHANNEL_PRESETS)} or random_fir:SEED:TAPS")
    s.add_argument("--snrs", default="inf", help="comma list of SNRs in dB ('inf' for clean)")
    s.add_argument("--test-fraction", type=float, default=0.25)
    s.add_argument("--duration", type=float, default=10.0, help="seconds per recording")
    s.set_defaults(func=cmd_simulate)

    for name, func, doc in (("extract", cmd_extract, "cache cycle segments and features"),
                            ("train", cmd_train, "train a model on the cached train split"),
                            ("evaluate", cmd_evaluate, "score the test split and write reports")):
        q = sub.add_parser(name, parents=[common], help=doc)
        q.add_argument("--features", default=None, help="feature kinds, e.g. 'Fbank&MFCC13'")
        q.set_defaults(func=func)
        if name == "train":
            q.add_argument("--epochs", type=int, default=None)
            q.add_argument("--batch-size", type=int, default=None)
        if name == "evaluate":
            q.add_argument("--checkpoint", default=None)

    c = sub.add_parser("compare", parents=[common], help="McNemar test between two reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--alpha", type=float, default=0.05)
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("physionet-manifest", parents=[common], help="build a manifest from PhysioNet folders")
    m.add_argument("root")
    m.add_argument("--test-list", default=None, help="file with one test recording name per line")
    m.set_defaults(func=cmd_physionet)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = load_config(args.config)
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        return args.func(args, cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, ManifestError, UnsegmentableRecording) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
