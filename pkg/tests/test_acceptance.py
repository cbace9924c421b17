"""One PASS/FAIL line per primary acceptance criterion, each at its stated tolerance and runtime budget."""

import hashlib
import os
import re
import subprocess
import sys
import time
from pathlib import Path

import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from pcgfuse.cli import main
from pcgfuse.evaluation import auc_roc, binary_metrics, mcnemar_test

TESTS = Path(__file__).parent


def report(capsys, name, ok, seconds, budget, detail):
    within = budget is None or seconds < budget
    verdict = "PASS" if ok and within else "FAIL"
    limit = f"< {budget:.0f}s" if budget else "no hard limit"
    line = f"{verdict}  {name}: {detail} [{seconds:.1f}s, budget {limit}]"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    return ok and within


def run_suite(*targets):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *targets],
                          cwd=TESTS.parent, capture_output=True, text=True)
    seconds = time.perf_counter() - t0
    m = re.search(r"(\d+) passed", proc.stdout)
    failed = re.search(r"(\d+) failed", proc.stdout)
    summary = f"{m.group(1) if m else 0} passed, {failed.group(1) if failed else 0} failed"
    return proc.returncode == 0, seconds, summary


class TestAcceptance:
    def test_dsp_identities(self, capsys):
        ok, sec, summary = run_suite("tests/test_dsp.py")
        assert report(capsys, "DSP identity suite (Parseval, filterbank linearity, DCT, log round trip)",
                      ok, sec, 60, summary)

    def test_distortion_model(self, capsys):
        t0 = time.perf_counter()
        prod = max(oracles.circular_product_error(s) for s in range(5))
        ident = oracles.channel_identity_errors()
        cross = oracles.cross_term_residual(1000)
        head = (prod < 1e-9 and ident["multiplicative"] < 1e-6 and ident["log_additive"] < 1e-6
                and ident["cepstral"] < 1e-6 and cross < 0.05)
        ok, sec, summary = run_suite("tests/test_distortion.py")
        detail = (f"circular product {prod:.1e}, multiplicative {ident['multiplicative']:.1e}, "
                  f"log additive {ident['log_additive']:.1e}, cepstral {ident['cepstral']:.1e}, "
                  f"cross term {cross:.4f} over 1000 draws; {summary}")
        assert report(capsys, "Distortion-model suite", head and ok, time.perf_counter() - t0, 120, detail)

    def test_gradients(self, capsys):
        ok, sec, summary = run_suite("tests/test_model.py::TestGradients")
        assert report(capsys, "Gradient suite (every layer and the tiny model, rel. error < 1e-3)", ok, sec, 180,
                      summary)

    def test_metric_oracles(self, capsys):
        t0 = time.perf_counter()
        m = binary_metrics([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], [1, 1, 1, 0, 1, 0, 0, 0, 0, 0])
        head = (
            abs(m["f1"] - 0.75) < 1e-9
            and abs(m["accuracy"] - 0.8) < 1e-9
            and auc_roc([1, 1, 0, 0], [0.9, 0.7, 0.8, 0.1]) == 0.75
            and round((0.8986 + 0.7740) / 2, 4) == 0.8363
            and abs(mcnemar_test(5, 15).chi2 - 4.05) < 1e-9
            and abs(mcnemar_test(10, 0).exact_p - 2 * 0.5**10) < 1e-12
        )
        ok, _, summary = run_suite("tests/test_eval.py")
        assert report(capsys, "Metric oracle suite (Macc, F1, accuracy, AUC, McNemar)", head and ok,
                      time.perf_counter() - t0, 10, summary)

    @pytest.mark.slow
    def test_end_to_end_experiment(self, capsys):
        from pcgfuse.experiment import run_synthetic_experiment

        t0 = time.perf_counter()
        res = run_synthetic_experiment(seed=0)
        sec = time.perf_counter() - t0
        macc = {k: s.report.metrics["macc"] for k, s in res.systems.items()}
        std = {k: s.report.domain_std for k, s in res.systems.items()}
        fused = "Fbank&MFCC13"
        a = all(macc[fused] >= macc[k] for k in macc)
        b = std[fused] <= std["MFCC13"]
        c = res.orthogonality_trained < res.orthogonality_init
        detail = (
            "Macc " + ", ".join(f"{k} {100 * v:.2f}" for k, v in macc.items())
            + f"; (a) fused >= singles {'yes' if a else 'no'}"
            + f"; (b) domain STD fused {100 * std[fused]:.2f} vs MFCC13 {100 * std['MFCC13']:.2f} "
            + f"{'yes' if b else 'no'}"
            + f"; (c) orthogonality {res.orthogonality_trained:.4f} < init {res.orthogonality_init:.4f} "
            + f"{'yes' if c else 'no'}"
        )
        # the ~10 minute figure is a target, so the verdict rests on (a), (b) and (c)
        report(capsys, "Seeded end-to-end synthetic experiment", a and b and c, sec, None,
               detail + "; runtime target about 600s")
        assert a, detail
        assert b, detail
        assert c, detail

    def test_reproducibility(self, capsys, tmp_path):
        t0 = time.perf_counter()
        digests, codes = [], []
        for run in ("one", "two"):
            d = tmp_path / run
            steps = [
                ["simulate", "--out", str(d / "corpus"), "--per-cell", "4", "--duration", "3"],
                ["extract", "--manifest", str(d / "corpus/manifest.csv")],
                ["train", "--manifest", str(d / "corpus/manifest.csv"), "--out", str(d / "m0.pcgm"),
                 "--epochs", "0"],
                ["train", "--manifest", str(d / "corpus/manifest.csv"), "--out", str(d / "m.pcgm"),
                 "--epochs", "2", "--batch-size", "8"],
                ["evaluate", "--manifest", str(d / "corpus/manifest.csv"), "--checkpoint", str(d / "m0.pcgm"),
                 "--out", str(d / "r0")],
                ["evaluate", "--manifest", str(d / "corpus/manifest.csv"), "--checkpoint", str(d / "m.pcgm"),
                 "--out", str(d / "r")],
                ["compare", str(d / "r0.jsonl"), str(d / "r.jsonl"), "--out", str(d / "cmp.json")],
            ]
            codes.append([main(argv + ["--seed", "3", "--deterministic"]) for argv in steps])
            h = hashlib.sha256()
            files = sorted(p for p in d.rglob("*") if p.is_file())
            for p in files:
                h.update(str(p.relative_to(d)).encode())
                h.update(p.read_bytes())
            digests.append((h.hexdigest(), len(files)))
        ok = digests[0] == digests[1] and codes[0] == codes[1] and all(c in (0, 2) for c in codes[0])
        detail = f"{digests[0][1]} output files, digests {'identical' if digests[0] == digests[1] else 'differ'}"
        assert report(capsys, "Reproducibility (--deterministic reruns are bit-identical)", ok,
                      time.perf_counter() - t0, None, detail + f"; exit codes {codes[0]}")

    def test_physionet_target(self, capsys, tmp_path):
        manifest = os.environ.get("PCGFUSE_PHYSIONET_MANIFEST")
        if not manifest:
            line = "SKIP  Real-corpus Macc within 3 points of 85.08 (optional; set PCGFUSE_PHYSIONET_MANIFEST)"
            ACCEPTANCE_LINES.append(line)
            with capsys.disabled():
                print("\n" + line)
            pytest.skip("real corpus not supplied")
        t0 = time.perf_counter()
        assert main(["extract", "--manifest", manifest, "--deterministic"]) == 0
        assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "m.pcgm"), "--deterministic"]) == 0
        assert main(["evaluate", "--manifest", manifest, "--checkpoint", str(tmp_path / "m.pcgm"),
                     "--out", str(tmp_path / "r")]) == 0
        from pcgfuse.evaluation import read_report

        macc = read_report(tmp_path / "r.jsonl").metrics["macc"]
        ok = macc is not None and abs(100 * macc - 85.08) <= 3
        assert report(capsys, "Real-corpus Macc within 3 points of 85.08", ok, time.perf_counter() - t0, None,
                      f"Macc {100 * macc:.2f}")
