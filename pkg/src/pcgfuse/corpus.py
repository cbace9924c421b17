"""Manifests, synthetic corpus generation and PhysioNet manifest building."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distortion import NoiseSpec, SyntheticPcgSpec, apply_channel, mix_at_snr, parse_channel, synth_pcg
from .preprocess import LABELS, write_onsets, write_wav

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("path", "label", "domain", "split", "patient_id")
OPTIONAL_COLUMNS = ("onsets", "snr_db", "channel")
SPLITS = ("train", "test")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    path: str
    label: str
    domain: str
    split: str
    patient_id: str
    onsets: str = ""
    snr_db: str = ""
    channel: str = ""

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)

    @property
    def key(self) -> str:
        p = Path(self.path)
        return "__".join(p.with_suffix("").parts).replace("..", "up")


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def validate(self) -> None:
        seen = set()
        for i, r in enumerate(self.rows, start=2):
            if r.path in seen:
                raise ManifestError(f"line {i}: duplicate path {r.path!r}")
            seen.add(r.path)
            if r.label not in LABELS:
                raise ManifestError(f"line {i}: label {r.label!r} not in {LABELS}")
            if r.split not in SPLITS:
                raise ManifestError(f"line {i}: split {r.split!r} not in {SPLITS}")
            if not r.domain:
                raise ManifestError(f"line {i}: empty domain")
            if not r.patient_id:
                raise ManifestError(f"line {i}: empty patient_id")
        train_p = {r.patient_id for r in self.rows if r.split == "train"}
        test_p = {r.patient_id for r in self.rows if r.split == "test"}
        leaked = sorted(train_p & test_p)
        if leaked:
            raise ManifestError(f"patients in both train and test splits: {leaked}")


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty manifest (header required)")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path}: header lacks columns {missing}")
        rows = [
            ManifestRow(**{k: (row.get(k) or "").strip() for k in REQUIRED_COLUMNS + OPTIONAL_COLUMNS})
            for row in reader
        ]
    m = Manifest(rows, path.parent)
    m.validate()
    return m


def write_manifest(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS + OPTIONAL_COLUMNS)
        for r in rows:
            w.writerow([getattr(r, c) for c in REQUIRED_COLUMNS + OPTIONAL_COLUMNS])


# ---------------------------------------------------------------- synthesis


def format_snr(snr: float) -> str:
    return "inf" if math.isinf(snr) else f"{snr:g}"


def parse_snr(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "+inf", "infinity", "clean"):
        return math.inf
    return float(t)


@dataclass
class SimulatedRecording:
    row: ManifestRow
    samples: np.ndarray
    clean: np.ndarray
    onsets: list[int]


def split_counts(total: int, n_cells: int) -> list[int]:
    base, rem = divmod(total, n_cells)
    return [base + (i < rem) for i in range(n_cells)]


def simulate_recordings(
    channels,
    snrs,
    seed: int,
    n_train: int | list[int],
    n_test: int | list[int],
    duration_s: float = 3.0,
    murmur_level: tuple[float, float] = (0.1, 0.5),
    murmur_band: tuple[float, float] = (150.0, 350.0),
    heart_rate: tuple[float, float] = (55.0, 95.0),
):
    """Yield synthetic recordings cell by cell (channel x class).

    Integer ``n_train``/``n_test`` are totals spread over the cells (counts
    differ by at most one); lists give per-cell counts. Each recording is
    its own patient. SNRs cycle through ``snrs`` within a cell.
    """
    cells = [(ch, lab) for ch in channels for lab in LABELS]
    tr = n_train if isinstance(n_train, list) else split_counts(n_train, len(cells))
    te = n_test if isinstance(n_test, list) else split_counts(n_test, len(cells))
    rng = np.random.default_rng(seed)
    idx = 0
    for ci, (ch_name, label) in enumerate(cells):
        ch = parse_channel(ch_name)
        for i in range(tr[ci] + te[ci]):
            split = "test" if i < te[ci] else "train"
            snr = snrs[i % len(snrs)]
            spec = SyntheticPcgSpec(
                heart_rate_bpm=float(rng.uniform(*heart_rate)),
                label=label,
                murmur_band=murmur_band,
                murmur_level=float(rng.uniform(*murmur_level)),
                duration_s=duration_s,
                seed=int(rng.integers(2**31)),
            )
            noise_seed = int(rng.integers(2**31))
            clean = synth_pcg(spec)
            noisy = mix_at_snr(clean, NoiseSpec(snr, seed=noise_seed))
            x = apply_channel(noisy, ch, "linear")
            x = x * (0.9 / np.max(np.abs(x)))
            name = f"{ch.label}_{label}_{i:04d}"
            row = ManifestRow(
                path=f"wav/{name}.wav",
                label=label,
                domain=ch.label,
                split=split,
                patient_id=f"p{idx:05d}",
                onsets=f"wav/{name}.onsets",
                snr_db=format_snr(snr),
                channel=ch.label,
            )
            idx += 1
            yield SimulatedRecording(row, x, clean, spec.s1_onsets())


def simulate_corpus(out_dir, channels, snrs, seed: int, per_cell: int | None = None,
                    test_fraction: float = 0.25, n_train: int | None = None, n_test: int | None = None,
                    **kwargs) -> Path:
    """Write WAVs, onset annotations and ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    if per_cell is not None:
        n_cells = 2 * len(channels)
        n_te = int(round(per_cell * test_fraction))
        train_arg, test_arg = [per_cell - n_te] * n_cells, [n_te] * n_cells
    else:
        if n_train is None or n_test is None:
            raise ValueError("give either per_cell or both n_train and n_test")
        train_arg, test_arg = n_train, n_test
    rows = []
    for rec in simulate_recordings(channels, snrs, seed, train_arg, test_arg, **kwargs):
        write_wav(out / rec.row.path, rec.samples)
        write_onsets(out / rec.row.onsets, rec.onsets)
        rows.append(rec.row)
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    log.info("simulated %d recordings into %s", len(rows), out)
    return manifest


# ---------------------------------------------------------------- PhysioNet


def physionet_manifest(root, test_list=None, out=None) -> list[ManifestRow]:
    """Build manifest rows from ``training-a`` .. ``training-f`` folders.

    Each folder holds ``REFERENCE.csv`` (name, -1 normal / 1 abnormal).
    Recordings named in ``test_list`` (one name per line) go to the test
    split. PhysioNet does not publish patient ids, so the recording name
    stands in for the patient.
    """
    root = Path(root)
    test_names = set(Path(test_list).read_text().split()) if test_list else set()
    rows = []
    for sub in sorted(root.glob("training-*")):
        ref = sub / "REFERENCE.csv"
        if not ref.exists():
            continue
        domain = sub.name.split("-", 1)[1]
        for name, lab in csv.reader(open(ref)):
            rows.append(ManifestRow(
                path=str((sub / f"{name}.wav").relative_to(root)),
                label="abnormal" if lab.strip() == "1" else "normal",
                domain=domain,
                split="test" if name in test_names else "train",
                patient_id=name,
            ))
    if out is not None:
        write_manifest(out, rows)
    return rows
