import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dynakv import cli
from dynakv import model as tm

TINY_MODEL = {"n_layers": 2, "n_heads": 2, "head_dim": 4, "d_model": 16,
              "max_seq_len": 64}


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    src = Path(__file__).parent.parent / "data" / "sample_corpus.txt"
    dst = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    dst.write_bytes(src.read_bytes()[:120_000])
    return dst


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def run(subcommand, config_path, *extra):
    return cli.main([subcommand, "--config", config_path, *extra])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, corpus_file):
    """calibrate -> train once; shared by the downstream subcommand tests."""
    root = tmp_path_factory.mktemp("pipeline")
    calib_cfg = write_config(root / "calibrate.json", {
        "schema_version": 1,
        "model": TINY_MODEL,
        "corpus": str(corpus_file),
        "tokens": 2000,
        "seq_len": 32,
        "seed": 3,
        "out_dir": str(root / "calib"),
    })
    assert run("calibrate", calib_cfg) == 0
    train_cfg = write_config(root / "train.json", {
        "schema_version": 1,
        "model": TINY_MODEL,
        "train": {"alpha": 0.5, "steps": 30, "batch": 2, "seq_len": 24},
        "corpus": str(corpus_file),
        "basis_dir": str(root / "calib" / "bases"),
        "seed": 3,
        "out_dir": str(root / "run"),
    })
    assert run("train", train_cfg) == 0
    return root


class TestCalibrate:
    def test_outputs(self, pipeline):
        bases = pipeline / "calib" / "bases"
        assert (bases / "basis_L0_K.dkvt").exists()
        assert (bases / "basis_L1_V.json").exists()
        doc = json.loads((pipeline / "calib" / "calibration.json").read_text())
        assert doc["config_hash"]
        assert doc["bases"]["0.K"]["samples"] >= 2000


class TestTrain:
    def test_outputs(self, pipeline):
        rows = [json.loads(line)
                for line in (pipeline / "run" / "steps.jsonl").read_text().splitlines()]
        assert len(rows) == 30
        assert set(rows[0]) == {"step", "l_ce", "r_soft", "total"}
        manifest = json.loads(
            (pipeline / "run" / "checkpoint" / "manifest.json").read_text())
        assert manifest["step"] == 30
        metrics = json.loads((pipeline / "run" / "metrics.json").read_text())
        assert metrics["alpha"] == 0.5

    def test_byte_identical_reruns(self, tmp_path, corpus_file):
        logs = []
        for name in ("a", "b"):
            cfg = write_config(tmp_path / f"{name}.json", {
                "schema_version": 1,
                "model": TINY_MODEL,
                "train": {"alpha": 0.2, "steps": 10, "batch": 2, "seq_len": 24},
                "corpus": str(corpus_file),
                "seed": 9,
                "out_dir": str(tmp_path / name),
            })
            assert run("train", cfg) == 0
            logs.append((tmp_path / name / "steps.jsonl").read_bytes())
        assert logs[0] == logs[1]

    def test_seed_override_changes_log(self, tmp_path, corpus_file):
        logs = []
        for name, seed in (("a", None), ("b", "77")):
            cfg = write_config(tmp_path / f"{name}.json", {
                "schema_version": 1,
                "model": TINY_MODEL,
                "train": {"alpha": 0.2, "steps": 5, "batch": 2, "seq_len": 24},
                "corpus": str(corpus_file),
                "seed": 1,
                "out_dir": str(tmp_path / name),
            })
            extra = ["--seed", seed] if seed else []
            assert run("train", cfg, *extra) == 0
            logs.append((tmp_path / name / "steps.jsonl").read_bytes())
        assert logs[0] != logs[1]


class TestEval:
    def test_metrics_and_rate_exactness(self, pipeline, corpus_file, tmp_path):
        cfg = write_config(tmp_path / "eval.json", {
            "schema_version": 1,
            "checkpoint": str(pipeline / "run" / "checkpoint"),
            "corpus": str(corpus_file),
            "modes": ["full", "soft", "hard"],
            "seq_len": 32,
            "max_windows": 3,
            "out_dir": str(tmp_path / "eval"),
        })
        assert run("eval", cfg) == 0
        doc = json.loads((tmp_path / "eval" / "metrics.json").read_text())
        assert set(doc["ppl"]) == {"full", "soft", "hard"}
        assert doc["hard_retain_rate"] == doc["memory"]["rate_overall"]
        assert doc["config_hash"]

    def test_dump_cache_flag(self, pipeline, corpus_file, tmp_path):
        cfg = write_config(tmp_path / "eval.json", {
            "schema_version": 1,
            "checkpoint": str(pipeline / "run" / "checkpoint"),
            "corpus": str(corpus_file),
            "modes": ["hard"],
            "seq_len": 24,
            "max_windows": 1,
            "out_dir": str(tmp_path / "eval"),
        })
        assert run("eval", cfg, "--dump-cache") == 0
        dump = tmp_path / "eval" / "cache_dump.jsonl"
        rows = [json.loads(line) for line in dump.read_text().splitlines()]
        assert rows and set(rows[0]) == {"layer", "token", "stream", "r", "values_digest"}

    def test_eviction_flags(self, pipeline, corpus_file, tmp_path):
        cfg = write_config(tmp_path / "eval.json", {
            "schema_version": 1,
            "checkpoint": str(pipeline / "run" / "checkpoint"),
            "corpus": str(corpus_file),
            "modes": ["hard"],
            "seq_len": 24,
            "max_windows": 1,
            "eviction": {"keep_budget": 24, "observation_window": 8,
                         "prefill_tokens": 48, "continue_tokens": 24},
            "out_dir": str(tmp_path / "eval"),
        })
        assert run("eval", cfg, "--evict-budget", "16", "--obs-window", "4") == 0
        doc = json.loads((tmp_path / "eval" / "metrics.json").read_text())
        report = doc["eviction"]
        assert report["keep_budget"] == 16
        assert report["observation_window"] == 4
        assert report["retained_tokens"] == 16
        assert report["effective_rate_measured"] == (
            report["keep_ratio"] * report["survivor_retain_rate"])
        assert np.isfinite(report["continuation_ppl"])


class TestAnalyze:
    def test_saturated_checkpoint_all_ones(self, tmp_path, corpus_file):
        model = tm.ToyTransformer(tm.ModelConfig(**TINY_MODEL), seed=0,
                                  gate_init_peak=40.0)
        tm.save_checkpoint(tmp_path / "ckpt", model, {"seed": 0})
        cfg = write_config(tmp_path / "analyze.json", {
            "schema_version": 1,
            "checkpoint": str(tmp_path / "ckpt"),
            "sentence": "A short probe sentence.",
            "out_dir": str(tmp_path / "out"),
        })
        assert run("analyze", cfg) == 0
        with open(tmp_path / "out" / "layer_token_matrix.csv") as fh:
            rows = list(csv.reader(fh))
        n_tokens = len(tm.tokenize("A short probe sentence."))
        assert len(rows) == 1 + TINY_MODEL["n_layers"]
        assert len(rows[0]) == 1 + n_tokens
        values = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
        assert np.all(values == 1.0)
        doc = json.loads((tmp_path / "out" / "analysis.json").read_text())
        assert doc["bos_rank"] >= 1
        assert doc["n_tokens"] == n_tokens

    def test_trace_csv_fields(self, pipeline, tmp_path):
        cfg = write_config(tmp_path / "analyze.json", {
            "schema_version": 1,
            "checkpoint": str(pipeline / "run" / "checkpoint"),
            "sentence": "The quiet archivist catalogued every manuscript.",
            "out_dir": str(tmp_path / "out"),
        })
        assert run("analyze", cfg) == 0
        with open(tmp_path / "out" / "trace.csv") as fh:
            rows = list(csv.DictReader(fh))
        n_tokens = len(tm.tokenize("The quiet archivist catalogued every manuscript."))
        assert len(rows) == n_tokens * TINY_MODEL["n_layers"] * 2
        assert set(rows[0]) == {"token_index", "token_text", "layer", "stream",
                                "soft_rate", "hard_rate"}
        assert rows[0]["token_text"] == "<BOS>"
        for row in rows:
            assert 0.0 <= float(row["soft_rate"]) <= 1.0
            assert 0.0 <= float(row["hard_rate"]) <= 1.0

    def test_curve_collation(self, pipeline, corpus_file, tmp_path):
        # two eval metric files with distinct alphas -> sorted curve rows
        docs = []
        for alpha in (0.0, 1.0):
            path = tmp_path / f"m{alpha}.json"
            path.write_text(json.dumps({
                "alpha": alpha, "ppl": {"hard": 5.0 + alpha},
                "hard_retain_rate": 1.0 - alpha / 2}))
            docs.append(str(path))
        cfg = write_config(tmp_path / "analyze.json", {
            "schema_version": 1,
            "checkpoint": str(pipeline / "run" / "checkpoint"),
            "sentence": "Probe.",
            "curve_metrics": docs[::-1],
            "out_dir": str(tmp_path / "out"),
        })
        assert run("analyze", cfg) == 0
        with open(tmp_path / "out" / "curve.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["alpha"]) for r in rows] == [0.0, 1.0]


class TestBench:
    def test_reports_ratio(self, pipeline, corpus_file, tmp_path):
        cfg = write_config(tmp_path / "bench.json", {
            "schema_version": 1,
            "checkpoint": str(pipeline / "run" / "checkpoint"),
            "corpus": str(corpus_file),
            "lengths": [16, 32],
            "out_dir": str(tmp_path / "bench"),
        })
        assert run("bench", cfg) == 0
        doc = json.loads((tmp_path / "bench" / "bench.json").read_text())
        assert len(doc["rows"]) == 2
        for row in doc["rows"]:
            assert row["full_tokens_per_s"] > 0
            assert row["hard_tokens_per_s"] > 0
            assert row["throughput_ratio"] > 0


class TestExitCodes:
    def test_unknown_key_rejected(self, tmp_path, corpus_file):
        cfg = write_config(tmp_path / "bad.json", {
            "schema_version": 1,
            "model": TINY_MODEL,
            "corpus": str(corpus_file),
            "out_dir": str(tmp_path / "o"),
            "unexpected_key": True,
        })
        assert run("calibrate", cfg) == 2

    def test_wrong_schema_version(self, tmp_path, corpus_file):
        cfg = write_config(tmp_path / "bad.json", {
            "schema_version": 2,
            "corpus": str(corpus_file),
            "out_dir": str(tmp_path / "o"),
        })
        assert run("calibrate", cfg) == 2

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert run("calibrate", str(path)) == 2

    def test_missing_corpus_is_io_error(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {
            "schema_version": 1,
            "model": TINY_MODEL,
            "corpus": str(tmp_path / "absent.txt"),
            "out_dir": str(tmp_path / "o"),
        })
        assert run("calibrate", cfg) == 4

    def test_numeric_failure_exit_code(self, tmp_path, corpus_file):
        model = tm.ToyTransformer(tm.ModelConfig(**TINY_MODEL), seed=0)
        model.params["lm_head"].data[0, 0] = np.inf
        tm.save_checkpoint(tmp_path / "poisoned", model, {})
        cfg = write_config(tmp_path / "t.json", {
            "schema_version": 1,
            "train": {"alpha": 0.0, "steps": 2, "batch": 1, "seq_len": 8},
            "corpus": str(corpus_file),
            "init_checkpoint": str(tmp_path / "poisoned"),
            "out_dir": str(tmp_path / "o"),
        })
        assert run("train", cfg) == 3

    def test_out_override(self, tmp_path, corpus_file):
        cfg = write_config(tmp_path / "c.json", {
            "schema_version": 1,
            "model": TINY_MODEL,
            "corpus": str(corpus_file),
            "tokens": 500,
            "seq_len": 32,
            "out_dir": str(tmp_path / "ignored"),
        })
        assert run("calibrate", cfg, "--out", str(tmp_path / "chosen")) == 0
        assert (tmp_path / "chosen" / "calibration.json").exists()
        assert not (tmp_path / "ignored").exists()
