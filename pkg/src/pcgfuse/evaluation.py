"""Recording-level evaluation: majority voting, screening metrics, ROC-AUC, per-domain accuracy, McNemar."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

NORMAL, ABNORMAL = 0, 1


def majority_vote(segment_preds) -> int:
    """Modal class of the segment predictions; an exact tie goes to abnormal."""
    preds = list(segment_preds)
    if not preds:
        raise ValueError("no segment predictions to vote on")
    n_abn = sum(1 for p in preds if int(p) == ABNORMAL)
    return ABNORMAL if 2 * n_abn >= len(preds) else NORMAL


def confusion(truths, preds) -> dict[str, int]:
    t = np.asarray(truths, dtype=int)
    p = np.asarray(preds, dtype=int)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} truths vs {p.size} predictions")
    return {
        "tp": int(((t == 1) & (p == 1)).sum()),
        "tn": int(((t == 0) & (p == 0)).sum()),
        "fp": int(((t == 0) & (p == 1)).sum()),
        "fn": int(((t == 1) & (p == 0)).sum()),
    }


def _ratio(num, den):
    return num / den if den else None


def binary_metrics(truths, preds) -> dict[str, float | None]:
    """Sensitivity, specificity, Macc, F1 and accuracy. Undefined rates are ``None``."""
    c = confusion(truths, preds)
    tp, tn, fp, fn = c["tp"], c["tn"], c["fp"], c["fn"]
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    return {
        "sensitivity": sens,
        "specificity": spec,
        "macc": (sens + spec) / 2 if sens is not None and spec is not None else None,
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "accuracy": _ratio(tp + tn, tp + tn + fp + fn),
    }


def auc_roc(truths, scores) -> float:
    """Exact ROC area as the normalised Mann-Whitney U (ties count one half)."""
    t = np.asarray(truths, dtype=int)
    s = np.asarray(scores, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError("truths and scores must align")
    n_pos = int((t == 1).sum())
    n_neg = int((t == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: only one class present")
    ranks = rankdata(s)
    u = ranks[t == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def domain_stats(domains, truths, preds) -> tuple[dict[str, float], float, float]:
    """Accuracy within each domain, then mean and population STD across domains."""
    per: dict[str, list[bool]] = defaultdict(list)
    for d, t, p in zip(domains, truths, preds):
        per[str(d)].append(int(t) == int(p))
    accs = {d: float(np.mean(v)) for d, v in sorted(per.items())}
    vals = np.array(list(accs.values()))
    if not len(vals):
        return {}, math.nan, math.nan
    return accs, float(vals.mean()), float(vals.std())


# ------------------------------------------------------------------ McNemar


def chi2_sf_df1(x: float) -> float:
    """Upper tail of the chi-squared distribution with one degree of freedom."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2))


def binomial_two_sided(b: int, c: int) -> float:
    n = b + c
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2**n
    return min(1.0, 2 * tail)


@dataclass(frozen=True)
class McNemarResult:
    b: int
    c: int
    chi2: float
    p_value: float
    exact_p: float | None
    significant: bool

    def __str__(self):
        verdict = "significant" if self.significant else "not significant"
        exact = f", exact p = {self.exact_p:.4g}" if self.exact_p is not None else ""
        return (f"McNemar: b = {self.b}, c = {self.c}, chi2 = {self.chi2:.4f}, "
                f"p = {self.p_value:.4g}{exact} -> {verdict} at alpha = 0.05")


@dataclass
class PairedOutcomes:
    correct_a: np.ndarray
    correct_b: np.ndarray

    def __post_init__(self):
        self.correct_a = np.asarray(self.correct_a, dtype=bool)
        self.correct_b = np.asarray(self.correct_b, dtype=bool)
        if self.correct_a.shape != self.correct_b.shape:
            raise ValueError("paired outcomes must cover the same recordings")

    @property
    def b(self) -> int:
        return int((self.correct_a & ~self.correct_b).sum())

    @property
    def c(self) -> int:
        return int((~self.correct_a & self.correct_b).sum())


def mcnemar_test(b: int, c: int, alpha: float = 0.05) -> McNemarResult:
    """Continuity-corrected McNemar test on discordant counts ``b`` and ``c``.

    The exact two-sided binomial p-value is added when ``b + c < 25``; the
    significance flag always uses the corrected chi-squared p-value.
    """
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    if b + c == 0:
        raise ValueError("no discordant pairs")
    chi2 = (abs(b - c) - 1) ** 2 / (b + c)
    p = chi2_sf_df1(chi2)
    exact = binomial_two_sided(b, c) if b + c < 25 else None
    return McNemarResult(b, c, chi2, p, exact, p < alpha)


def mcnemar_paired(pair: PairedOutcomes, alpha: float = 0.05) -> McNemarResult:
    return mcnemar_test(pair.b, pair.c, alpha)


# ------------------------------------------------------------------ reports


@dataclass
class RecordingResult:
    record_id: str
    domain: str
    truth: int
    predicted: int
    p_abnormal: float
    n_segments: int = 1


@dataclass
class EvalReport:
    recordings: list[RecordingResult]
    confusion: dict[str, int] = field(default_factory=dict)
    metrics: dict[str, float | None] = field(default_factory=dict)
    domain_accuracy: dict[str, float] = field(default_factory=dict)
    domain_mean: float = math.nan
    domain_std: float = math.nan

    @classmethod
    def from_recordings(cls, recordings: list[RecordingResult]) -> "EvalReport":
        truths = [r.truth for r in recordings]
        preds = [r.predicted for r in recordings]
        metrics = binary_metrics(truths, preds)
        try:
            metrics["auc"] = auc_roc(truths, [r.p_abnormal for r in recordings])
        except ValueError:
            metrics["auc"] = None
        accs, mean, std = domain_stats([r.domain for r in recordings], truths, preds)
        return cls(list(recordings), confusion(truths, preds), metrics, accs, mean, std)

    def correctness(self) -> dict[str, bool]:
        return {r.record_id: r.truth == r.predicted for r in self.recordings}

    def to_text(self) -> str:
        def pct(v):
            return "   n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:6.2f}"

        lines = [f"recordings: {len(self.recordings)}", ""]
        lines.append("metric        value(%)")
        for name in ("auc", "f1", "macc", "sensitivity", "specificity", "accuracy"):
            lines.append(f"{name:<13} {pct(self.metrics.get(name))}")
        c = self.confusion
        lines += ["", f"TP {c['tp']}  TN {c['tn']}  FP {c['fp']}  FN {c['fn']}", "", "domain        accuracy(%)  n"]
        counts = defaultdict(int)
        for r in self.recordings:
            counts[r.domain] += 1
        for d, a in self.domain_accuracy.items():
            lines.append(f"{d:<13} {pct(a)}     {counts[d]}")
        lines.append(f"domain mean   {pct(self.domain_mean)} +- {pct(self.domain_std).strip()}")
        return "\n".join(lines) + "\n"

    def to_records(self) -> list[dict]:
        recs = [{"type": "metric", "name": k, "value": v} for k, v in self.metrics.items()]
        recs += [{"type": "metric", "name": k, "value": v} for k, v in self.confusion.items()]
        recs += [{"type": "metric", "name": f"domain_acc.{d}", "value": a} for d, a in self.domain_accuracy.items()]
        recs += [
            {"type": "metric", "name": "domain_mean", "value": self.domain_mean},
            {"type": "metric", "name": "domain_std", "value": self.domain_std},
        ]
        recs += [
            {
                "type": "recording",
                "id": r.record_id,
                "domain": r.domain,
                "truth": r.truth,
                "predicted": r.predicted,
                "p_abnormal": r.p_abnormal,
                "n_segments": r.n_segments,
            }
            for r in self.recordings
        ]
        return recs

    def write(self, path) -> tuple[Path, Path]:
        """Write ``<path>.txt`` (human) and ``<path>.jsonl`` (one record per line)."""
        base = Path(path)
        if base.suffix in (".txt", ".jsonl"):
            base = base.with_suffix("")
        base.parent.mkdir(parents=True, exist_ok=True)
        txt, jsonl = base.with_suffix(".txt"), base.with_suffix(".jsonl")
        txt.write_text(self.to_text())
        jsonl.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records()))
        return txt, jsonl


def read_report(path) -> EvalReport:
    path = Path(path)
    if path.suffix != ".jsonl":
        path = path.with_suffix(".jsonl")
    recs = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if row.get("type") == "recording":
            recs.append(RecordingResult(row["id"], row["domain"], int(row["truth"]), int(row["predicted"]),
                                        float(row["p_abnormal"]), int(row.get("n_segments", 1))))
    return EvalReport.from_recordings(recs)


def compare_reports(a: EvalReport, b: EvalReport, alpha: float = 0.05) -> McNemarResult:
    ca, cb = a.correctness(), b.correctness()
    if set(ca) != set(cb):
        diff = sorted(set(ca) ^ set(cb))
        raise ValueError(f"reports cover different recordings; symmetric difference: {diff}")
    ids = sorted(ca)
    return mcnemar_paired(PairedOutcomes([ca[i] for i in ids], [cb[i] for i in ids]), alpha)
