import hashlib
import json
import wave
from pathlib import Path

import numpy as np
import pytest

from pcgfuse.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, feature_dir_name, main
from pcgfuse.corpus import ManifestError, ManifestRow, read_manifest, write_manifest
from pcgfuse.distortion import SyntheticPcgSpec, synth_pcg
from pcgfuse.evaluation import binary_metrics, read_report
from pcgfuse.features import FeatureConfig, parse_kinds
from pcgfuse.formats import read_checkpoint, read_features, write_checkpoint
from pcgfuse.model import init_model
from pcgfuse.preprocess import write_onsets, write_wav


def digest_tree(root: Path, pattern="**/*"):
    h = hashlib.sha256()
    for p in sorted(root.glob(pattern)):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def simulate(out, *extra):
    argv = ["simulate", "--out", str(out), "--per-cell", "4", "--duration", "3", "--seed", "7", *extra]
    assert main(argv) == EXIT_OK
    return out / "manifest.csv"


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = simulate(root)
    assert main(["extract", "--manifest", str(manifest), "--deterministic"]) == EXIT_OK
    return manifest


class TestSimulate:
    def test_counts(self, tmp_path):
        argv = ["simulate", "--out", str(tmp_path), "--per-cell", "10", "--duration", "2", "--channels",
                "identity,resonant"]
        assert main(argv) == EXIT_OK
        assert len(list((tmp_path / "wav").glob("*.wav"))) == 40
        m = read_manifest(tmp_path / "manifest.csv")
        assert len(m.rows) == 40
        assert {r.domain for r in m.rows} == {"identity", "resonant"}

    def test_wav_format(self, corpus):
        with wave.open(str(next((corpus.parent / "wav").glob("*.wav"))), "rb") as fh:
            assert (fh.getnchannels(), fh.getsampwidth(), fh.getframerate()) == (1, 2, 1000)

    def test_byte_identical(self, tmp_path):
        simulate(tmp_path / "a")
        simulate(tmp_path / "b")
        assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")

    def test_snr_column(self, tmp_path):
        simulate(tmp_path, "--snrs", "0,10,inf", "--channels", "identity")
        assert {r.snr_db for r in read_manifest(tmp_path / "manifest.csv").rows} == {"0", "10", "inf"}

    def test_patient_split(self, corpus):
        m = read_manifest(corpus)
        train = {r.patient_id for r in m.split("train")}
        assert train and not train & {r.patient_id for r in m.split("test")}

    @pytest.mark.parametrize("flags", [["--channels", "bogus"], ["--snrs", "loud"]])
    def test_bad_spec(self, tmp_path, flags):
        assert main(["simulate", "--out", str(tmp_path), *flags]) == EXIT_USAGE


class TestManifest:
    def test_leak_rejected(self, tmp_path):
        rows = [ManifestRow("a.wav", "normal", "x", "train", "p1"), ManifestRow("b.wav", "normal", "x", "test", "p1")]
        write_manifest(tmp_path / "m.csv", rows)
        with pytest.raises(ManifestError, match="p1"):
            read_manifest(tmp_path / "m.csv")

    def test_header_required(self, tmp_path):
        (tmp_path / "m.csv").write_text("a.wav,normal\n")
        with pytest.raises(ManifestError, match="header"):
            read_manifest(tmp_path / "m.csv")

    def test_duplicate_path(self, tmp_path):
        rows = [ManifestRow("a.wav", "normal", "x", "train", "p1"), ManifestRow("a.wav", "normal", "x", "train", "p2")]
        write_manifest(tmp_path / "m.csv", rows)
        with pytest.raises(ManifestError, match="duplicate"):
            read_manifest(tmp_path / "m.csv")

    def test_cli_reports_data_error(self, tmp_path):
        (tmp_path / "m.csv").write_text("path\n")
        assert main(["extract", "--manifest", str(tmp_path / "m.csv")]) == EXIT_DATA


class TestExtract:
    def three_cycle(self, tmp_path):
        x = synth_pcg(SyntheticPcgSpec(heart_rate_bpm=60, duration_s=3.0, seed=2))
        write_wav(tmp_path / "r.wav", x)
        write_onsets(tmp_path / "r.onsets", [0, 1000, 2000])
        write_manifest(tmp_path / "m.csv", [ManifestRow("r.wav", "normal", "a", "train", "p", "r.onsets")])
        return tmp_path / "m.csv"

    def test_three_cycles(self, tmp_path):
        m = self.three_cycle(tmp_path)
        assert main(["extract", "--manifest", str(m)]) == EXIT_OK
        fdir = tmp_path / "cache" / feature_dir_name(parse_kinds("Fbank&MFCC13"), FeatureConfig())
        files = sorted(fdir.glob("*.pcgf"))
        assert len(files) == 3
        for f in files:
            values, tag = read_features(f)
            assert values.shape == (39, 246) and tag == "Fbank&MFCC13"

    def test_idempotent(self, tmp_path):
        m = self.three_cycle(tmp_path)
        main(["extract", "--manifest", str(m)])
        before = {p: p.stat().st_mtime_ns for p in (tmp_path / "cache").rglob("*") if p.is_file()}
        main(["extract", "--manifest", str(m)])
        after = {p: p.stat().st_mtime_ns for p in (tmp_path / "cache").rglob("*") if p.is_file()}
        assert before == after

    def test_changed_source_rewritten(self, tmp_path):
        m = self.three_cycle(tmp_path)
        main(["extract", "--manifest", str(m)])
        write_onsets(tmp_path / "r.onsets", [0, 1000])
        main(["extract", "--manifest", str(m)])
        fdir = tmp_path / "cache" / feature_dir_name(parse_kinds("Fbank&MFCC13"), FeatureConfig())
        assert json.loads((fdir / "r.json").read_text())["n_segments"] == 2

    def test_cache_env(self, tmp_path, monkeypatch):
        m = self.three_cycle(tmp_path)
        monkeypatch.setenv("PCGFUSE_CACHE", str(tmp_path / "elsewhere"))
        main(["extract", "--manifest", str(m)])
        assert (tmp_path / "elsewhere" / "segments").is_dir() and not (tmp_path / "cache").exists()

    def test_unreadable_skipped(self, tmp_path):
        m = self.three_cycle(tmp_path)
        rows = read_manifest(m).rows + [ManifestRow("missing.wav", "normal", "a", "train", "q")]
        write_manifest(m, rows)
        assert main(["extract", "--manifest", str(m)]) == EXIT_DATA
        assert len(list((tmp_path / "cache" / "segments").glob("*.pcgf"))) == 3

    def test_count_matches_segments(self, corpus):
        fdir = corpus.parent / "cache" / feature_dir_name(parse_kinds("Fbank&MFCC13"), FeatureConfig())
        total = sum(json.loads(p.read_text())["n_segments"] for p in fdir.glob("*.json"))
        assert total == len(list(fdir.glob("*.pcgf"))) > 0

    def test_parallel_matches_serial(self, corpus, tmp_path):
        main(["extract", "--manifest", str(corpus), "--workers", "2", "--cache", str(tmp_path)])
        fdir = feature_dir_name(parse_kinds("Fbank&MFCC13"), FeatureConfig())
        assert digest_tree(tmp_path / fdir, "*.pcgf") == digest_tree(corpus.parent / "cache" / fdir, "*.pcgf")


def train(corpus, out, *extra):
    return main(["train", "--manifest", str(corpus), "--out", str(out), "--batch-size", "8", "--seed", "1",
                 "--deterministic", *extra])


class TestTrain:
    def test_zero_epochs_is_init(self, corpus, tmp_path):
        assert train(corpus, tmp_path / "m.pcgm", "--epochs", "0") == EXIT_OK
        ck = read_checkpoint(tmp_path / "m.pcgm")
        init = init_model(39, 1)
        assert ck.keys() == init.keys()
        for k in init:
            np.testing.assert_array_equal(ck[k], init[k].astype(np.float32))

    def test_deterministic(self, corpus, tmp_path):
        for name in ("a", "b"):
            assert train(corpus, tmp_path / f"{name}.pcgm", "--epochs", "1") == EXIT_OK
        assert (tmp_path / "a.pcgm").read_bytes() == (tmp_path / "b.pcgm").read_bytes()
        assert (tmp_path / "a.log.jsonl").read_bytes() == (tmp_path / "b.log.jsonl").read_bytes()
        meta = json.loads((tmp_path / "a.json").read_text())
        assert meta["features"] == "Fbank&MFCC13" and meta["train"]["epochs"] == 1

    def test_missing_cache(self, corpus, tmp_path):
        code = train(corpus, tmp_path / "m.pcgm", "--epochs", "0", "--cache", str(tmp_path / "empty"))
        assert code == EXIT_DATA

    def test_missing_cache_message(self, corpus, tmp_path, capsys):
        train(corpus, tmp_path / "m.pcgm", "--cache", str(tmp_path / "empty"))
        assert "pcgfuse extract" in capsys.readouterr().err

    def test_config_file_and_override(self, corpus, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"epochs": 0, "batch_size": 16}}))
        assert train(corpus, tmp_path / "m.pcgm", "--config", str(cfg)) == EXIT_OK
        meta = json.loads((tmp_path / "m.json").read_text())
        assert meta["train"]["epochs"] == 0 and meta["train"]["batch_size"] == 8

    def test_bad_config_key(self, corpus, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"epochz": 0}}))
        assert train(corpus, tmp_path / "m.pcgm", "--config", str(cfg)) == EXIT_USAGE


class TestEvaluate:
    @pytest.fixture
    def biased(self, corpus, tmp_path):
        # a checkpoint whose classifier ignores the input and always says abnormal
        p = init_model(39, 0)
        p["fc.w"][:] = 0
        p["fc.b"][:] = [-5.0, 5.0]
        write_checkpoint(tmp_path / "abn.pcgm", p)
        return tmp_path / "abn.pcgm"

    def test_all_correct_toy(self, corpus, biased, tmp_path):
        rows = [r for r in read_manifest(corpus).rows if r.label == "abnormal"][:4]
        for r in rows:
            r.split = "test"
        sub = corpus.parent / "abn_only.csv"
        write_manifest(sub, rows)
        argv = ["evaluate", "--manifest", str(sub), "--checkpoint", str(biased), "--out", str(tmp_path / "r"),
                "--features", "Fbank&MFCC13"]
        assert main(argv) == EXIT_OK
        rep = read_report(tmp_path / "r.jsonl")
        assert len(rep.recordings) == 4 and rep.metrics["accuracy"] == 1.0
        assert rep.metrics["specificity"] is None

    def test_report_rows_and_recount(self, corpus, tmp_path):
        train(corpus, tmp_path / "m.pcgm", "--epochs", "1")
        argv = ["evaluate", "--manifest", str(corpus), "--checkpoint", str(tmp_path / "m.pcgm"), "--out",
                str(tmp_path / "rep")]
        assert main(argv) == EXIT_OK
        text = (tmp_path / "rep.txt").read_text()
        for domain in ("identity", "lowpass_tilt"):
            assert sum(line.startswith(domain) for line in text.splitlines()) == 1
        rows = [json.loads(line) for line in (tmp_path / "rep.jsonl").read_text().splitlines()]
        recs = [r for r in rows if r["type"] == "recording"]
        assert len(recs) == len(read_manifest(corpus).split("test"))
        metrics = {r["name"]: r["value"] for r in rows if r["type"] == "metric"}
        recount = binary_metrics([r["truth"] for r in recs], [r["predicted"] for r in recs])
        for k, v in recount.items():
            assert metrics[k] == v

    def test_missing_checkpoint(self, corpus, tmp_path):
        argv = ["evaluate", "--manifest", str(corpus), "--checkpoint", str(tmp_path / "no.pcgm"), "--out",
                str(tmp_path / "r"), "--features", "Fbank&MFCC13"]
        assert main(argv) == EXIT_DATA


def write_report(path, correct):
    lines = [json.dumps({"type": "recording", "id": f"r{i}", "domain": "a", "truth": 1, "predicted": int(c),
                         "p_abnormal": 0.5, "n_segments": 1}) for i, c in enumerate(correct)]
    path.write_text("\n".join(lines) + "\n")
    return path


class TestCompare:
    def test_self(self, tmp_path, capsys):
        a = write_report(tmp_path / "a.jsonl", [1, 0, 1])
        assert main(["compare", str(a), str(a)]) == EXIT_DATA
        assert "no discordant pairs" in capsys.readouterr().err

    def test_constructed(self, tmp_path, capsys):
        a = write_report(tmp_path / "a.jsonl", [i < 5 for i in range(20)])
        b = write_report(tmp_path / "b.jsonl", [i >= 5 for i in range(20)])
        assert main(["compare", str(a), str(b), "--out", str(tmp_path / "ab.json")]) == EXIT_OK
        assert "significant" in capsys.readouterr().out
        ab = json.loads((tmp_path / "ab.json").read_text())
        assert (ab["b"], ab["c"]) == (5, 15) and ab["significant"]
        assert round(ab["p_value"], 4) == 0.0442
        main(["compare", str(b), str(a), "--out", str(tmp_path / "ba.json")])
        assert json.loads((tmp_path / "ba.json").read_text())["p_value"] == ab["p_value"]

    def test_mismatch_lists_difference(self, tmp_path, capsys):
        a = write_report(tmp_path / "a.jsonl", [1, 1])
        b = write_report(tmp_path / "b.jsonl", [1, 1, 0])
        assert main(["compare", str(a), str(b)]) == EXIT_DATA
        assert "r2" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["compare", str(tmp_path / "x"), str(tmp_path / "y")]) == EXIT_DATA


class TestExitCodes:
    def test_unknown_verb(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == EXIT_USAGE

    def test_missing_out(self):
        assert main(["simulate"]) == EXIT_USAGE

    def test_bad_workers(self, corpus):
        assert main(["extract", "--manifest", str(corpus), "--workers", "0"]) == EXIT_USAGE

    def test_physionet_manifest(self, tmp_path):
        sub = tmp_path / "training-a"
        sub.mkdir()
        (sub / "REFERENCE.csv").write_text("a0001,1\na0002,-1\n")
        (tmp_path / "test.txt").write_text("a0002\n")
        assert main(["physionet-manifest", str(tmp_path), "--test-list", str(tmp_path / "test.txt")]) == EXIT_OK
        rows = read_manifest(tmp_path / "manifest.csv").rows
        assert [(r.label, r.domain, r.split) for r in rows] == [("abnormal", "a", "train"), ("normal", "a", "test")]

    def test_physionet_empty(self, tmp_path):
        assert main(["physionet-manifest", str(tmp_path)]) == EXIT_DATA
