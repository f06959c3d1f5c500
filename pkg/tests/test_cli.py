import json
import subprocess
import sys
from pathlib import Path

import pytest

from minidpg.cli import main, parse_config_file, resolve_config, ConfigError

CONFIG = str(Path(__file__).resolve().parent.parent / "configs" / "tiny.cfg")


def run_cli(*args):
    return main(list(args))


def run_cli_proc(*args):
    return subprocess.run([sys.executable, "-m", "minidpg.cli", *args],
                          capture_output=True, text=True)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """corpus -> base -> tune once; reused by the read-only tests below."""
    root = tmp_path_factory.mktemp("pipe")
    assert run_cli("gen-corpus", "--config", CONFIG,
                   "--out", str(root / "corpus")) == 0
    assert run_cli("train-base", "--config", CONFIG,
                   "--corpus", str(root / "corpus"),
                   "--out", str(root / "base")) == 0
    assert run_cli("tune", "--config", CONFIG,
                   "--corpus", str(root / "corpus"),
                   "--base", str(root / "base" / "base.ckpt"),
                   "--updates", "10",
                   "--out", str(root / "tuned")) == 0
    return root


class TestConfig:
    def test_parse_rejects_unknown_key(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("no.such.key=1\n")
        with pytest.raises(ConfigError):
            parse_config_file(p)

    def test_parse_rejects_malformed_line(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("just words\n")
        with pytest.raises(ConfigError):
            parse_config_file(p)

    def test_overrides_win_over_file(self):
        cfg = resolve_config(CONFIG, {"corpus.seed": "99"})
        assert cfg["corpus.seed"] == 99
        assert cfg["vocab.preset"] == "tiny"

    def test_defaults_without_file(self):
        cfg = resolve_config(None, {})
        assert cfg["corpus.l_max"] == 24
        assert cfg["tune.method"] == "kldpg"

    def test_comments_and_blanks_ignored(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\n\ncorpus.seed=5\n")
        assert parse_config_file(p) == {"corpus.seed": "5"}


class TestExitCodes:
    def test_config_error_is_two(self, tmp_path):
        rc = run_cli("gen-corpus", "--config", "/nonexistent.cfg",
                     "--out", str(tmp_path / "o"))
        assert rc == 2

    def test_bad_value_is_two(self, tmp_path):
        rc = run_cli("gen-corpus", "--config", CONFIG,
                     "--corpus.n_train", "not_a_number",
                     "--out", str(tmp_path / "o"))
        assert rc == 2

    def test_runtime_error_is_one(self, tmp_path):
        # vocabulary too small for requested unique corpus size
        rc = run_cli("gen-corpus", "--config", CONFIG,
                     "--corpus.n_train", "500",
                     "--corpus.max_retries", "20",
                     "--out", str(tmp_path / "o"))
        assert rc == 1

    def test_refuses_to_overwrite(self, tmp_path):
        out = tmp_path / "o"
        assert run_cli("gen-corpus", "--config", CONFIG,
                       "--out", str(out)) == 0
        assert run_cli("gen-corpus", "--config", CONFIG,
                       "--out", str(out)) == 2
        assert run_cli("gen-corpus", "--config", CONFIG, "--force",
                       "--out", str(out)) == 0

    def test_subprocess_entrypoint(self, tmp_path):
        proc = run_cli_proc("gen-corpus", "--config", CONFIG,
                            "--out", str(tmp_path / "o"))
        assert proc.returncode == 0


class TestManifests:
    def test_every_artifact_listed_with_digest(self, pipeline):
        for run_dir in ("corpus", "base", "tuned"):
            doc = json.loads((pipeline / run_dir /
                              "run_manifest.json").read_text())
            files = {p.name for p in (pipeline / run_dir).iterdir()}
            files.discard("run_manifest.json")
            assert set(doc["artifacts"]) == files
            assert all(len(d) == 64 for d in doc["artifacts"].values())
            assert "wall_clock_sec" in doc and "version" in doc

    def test_input_digest_check(self, pipeline, tmp_path):
        doc = json.loads((pipeline / "corpus" /
                          "run_manifest.json").read_text())
        good = doc["artifacts"]["train.txt"]
        rc = run_cli("train-base", "--config", CONFIG,
                     "--corpus", str(pipeline / "corpus"),
                     "--inputs.corpus_digest", good,
                     "--out", str(tmp_path / "b2"))
        assert rc == 0
        rc = run_cli("train-base", "--config", CONFIG,
                     "--corpus", str(pipeline / "corpus"),
                     "--inputs.corpus_digest", "0" * 64,
                     "--out", str(tmp_path / "b3"))
        assert rc == 2


class TestSample:
    def test_prompt_prefix_contract(self, pipeline, tmp_path):
        out = tmp_path / "s"
        assert run_cli("sample", "--config", CONFIG,
                       "--checkpoint", str(pipeline / "tuned" / "tuned.ckpt"),
                       "--prompt", "x =", "-n", "12",
                       "--out", str(out)) == 0
        for line in (out / "samples.txt").read_text().splitlines():
            assert line.startswith("x =")

    def test_sidecar_csv_schema(self, pipeline, tmp_path):
        out = tmp_path / "s"
        assert run_cli("sample", "--config", CONFIG,
                       "--checkpoint", str(pipeline / "base" / "base.ckpt"),
                       "-n", "6", "--out", str(out)) == 0
        lines = (out / "samples.csv").read_text().splitlines()
        assert lines[0] == "index,compiles,error_kind,char_length,ast_nodes"
        assert len(lines) == 7


class TestEvaluateAndExact:
    def test_evaluate_artifacts(self, pipeline, tmp_path):
        out = tmp_path / "e"
        assert run_cli("evaluate", "--config", CONFIG,
                       "--corpus", str(pipeline / "corpus"),
                       "--base", str(pipeline / "base" / "base.ckpt"),
                       "--out", str(out)) == 0
        doc = json.loads((out / "metrics.json").read_text())
        assert 0.0 <= doc["compilability_rate"] <= 1.0
        assert (out / "error_histogram.csv").exists()
        assert (out / "rank_frequency.csv").exists()

    def test_enumerate_exact_outputs(self, pipeline, tmp_path):
        out = tmp_path / "x"
        assert run_cli("enumerate-exact", "--config", CONFIG,
                       "--checkpoint", str(pipeline / "base" / "base.ckpt"),
                       "--out", str(out)) == 0
        doc = json.loads((out / "exact.json").read_text())
        assert 0.0 <= doc["Z"] <= 1.0
        assert doc["support_size"] >= 1
        lines = (out / "p_table.csv").read_text().splitlines()
        assert lines[0] == "sequence,probability"
        probs = [float(l.rsplit(",", 1)[1]) for l in lines[1:]]
        assert sum(probs) == pytest.approx(1.0, abs=1e-9)


class TestReport:
    def test_single_trace_summary(self, pipeline, tmp_path):
        out = tmp_path / "r"
        assert run_cli("report",
                       "--traces", str(pipeline / "tuned" / "trace.csv"),
                       "--out", str(out)) == 0
        summary = (out / "summary.csv").read_text().splitlines()
        assert len(summary) == 2
        assert summary[1].startswith("kldpg,")

    def test_long_format_shape(self, pipeline, tmp_path):
        out = tmp_path / "r"
        assert run_cli("report",
                       "--traces", str(pipeline / "tuned" / "trace.csv"),
                       "--out", str(out)) == 0
        rows = (out / "long.csv").read_text().splitlines()
        assert rows[0] == "method,update,metric,value"
        assert all(r.split(",")[0] == "kldpg" for r in rows[1:])

    def test_empty_trace_is_schema_mismatch(self, tmp_path):
        bad = tmp_path / "empty.csv"
        bad.write_text("")
        rc = run_cli("report", "--traces", str(bad),
                     "--out", str(tmp_path / "r"))
        assert rc == 1


class TestEndToEndDeterminism:
    def test_pipeline_digests_identical(self, tmp_path):
        digests = []
        for tag in ("one", "two"):
            root = tmp_path / tag
            for args in (
                ["gen-corpus", "--config", CONFIG,
                 "--out", str(root / "corpus")],
                ["train-base", "--config", CONFIG,
                 "--corpus", str(root / "corpus"),
                 "--out", str(root / "base")],
                ["tune", "--config", CONFIG,
                 "--corpus", str(root / "corpus"),
                 "--base", str(root / "base" / "base.ckpt"),
                 "--updates", "8", "--out", str(root / "tuned")],
                ["evaluate", "--config", CONFIG,
                 "--corpus", str(root / "corpus"),
                 "--base", str(root / "base" / "base.ckpt"),
                 "--checkpoint", str(root / "tuned" / "tuned.ckpt"),
                 "--out", str(root / "eval")],
            ):
                assert run_cli(*args) == 0
            run_digests = {}
            for sub in ("corpus", "base", "tuned", "eval"):
                doc = json.loads((root / sub /
                                  "run_manifest.json").read_text())
                # trace_manifest.json carries wall-clock and is volatile
                # by construction; every data artifact must be identical
                run_digests[sub] = {k: v for k, v in doc["artifacts"].items()
                                    if k != "trace_manifest.json"}
            digests.append(run_digests)
        assert digests[0] == digests[1]
