import io
import json

import pytest

from dtr.cli import (
    STAGES,
    LockError,
    ManifestError,
    RunPaths,
    cmd_chat,
    cmd_evaluate,
    cmd_generate,
    cmd_pipeline,
    cmd_prepare,
    cmd_style_tokens,
    cmd_sweep_pr,
    load_world,
    main,
)
from dtr.config import ConfigError, config_from_dict

TINY = {
    "seed": 3,
    "styles": ["polite"],
    "pr": 25.0,
    "z": 4,
    "beam": 2,
    "classifier_min_accuracy": 0.0,
    "corpus": {"n_dialogues": 40, "n_style": 60},
    "generator": {
        "model": {"hidden": 16, "layers": 1, "heads": 2, "ff": 32, "dropout": 0.0, "max_len": 48},
        "train": {"lr": 1e-3, "token_batch": 256, "max_epochs": 2, "patience": 2},
    },
    "dae": {
        "model": {"hidden": 16, "layers": 1, "heads": 2, "ff": 32, "dropout": 0.0, "max_len": 32},
        "train": {"lr": 1e-3, "token_batch": 256, "max_epochs": 2, "patience": 2},
    },
    "disentangler": {
        "model": {"hidden": 16, "layers": 1, "heads": 2, "ff": 32, "dropout": 0.0, "max_len": 32},
        "train": {"lr": 1e-3, "token_batch": 256, "max_epochs": 2, "patience": 2},
    },
    "grounded": {"hidden": 16, "layers": 1, "heads": 2, "ff": 32, "dropout": 0.0, "max_len": 64},
    "rewriter": {
        "model": {"hidden": 16, "layers": 1, "heads": 2, "ff": 32, "dropout": 0.0, "max_len": 32},
        "train": {"lr": 1e-3, "token_batch": 256, "max_epochs": 2, "patience": 2},
    },
    "classifier": {
        "model": {"hidden": 16, "layers": 1, "heads": 2, "ff": 32, "dropout": 0.0, "max_len": 32},
        "train": {"lr": 1e-3, "token_batch": 256, "max_epochs": 2, "patience": 2},
    },
    "rl": {"steps": 2, "batch_size": 2, "lr": 1e-3, "eval_every": 1, "max_examples": 8},
}


def _tiny_cfg(run_dir, **extra):
    return config_from_dict({**TINY, "run_dir": str(run_dir), **extra})


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One fully trained tiny run shared by the read-only command tests."""
    run_dir = tmp_path_factory.mktemp("run")
    cfg = _tiny_cfg(run_dir)
    cmd_prepare(cfg)
    cmd_pipeline(cfg)
    return cfg


class TestPrepare:
    def test_rerun_writes_identical_bytes(self, tmp_path):
        cfg = _tiny_cfg(tmp_path / "r")
        paths = cmd_prepare(cfg)
        first = {
            p.name: p.read_bytes()
            for p in (
                paths.dialogues_file(),
                paths.style_file("polite"),
                paths.vocab_file(),
                paths.splits_file(),
                paths.gold_file(),
            )
        }
        paths = cmd_prepare(cfg)
        for p in (
            paths.dialogues_file(),
            paths.style_file("polite"),
            paths.vocab_file(),
            paths.splits_file(),
            paths.gold_file(),
        ):
            assert p.read_bytes() == first[p.name]

    def test_same_seed_other_dir_identical_corpora(self, tmp_path):
        a = cmd_prepare(_tiny_cfg(tmp_path / "a"))
        b = cmd_prepare(_tiny_cfg(tmp_path / "b"))
        assert a.dialogues_file().read_bytes() == b.dialogues_file().read_bytes()
        assert a.vocab_file().read_bytes() == b.vocab_file().read_bytes()

    def test_select_top1_keeps_single_candidate(self, tmp_path):
        plain = cmd_prepare(_tiny_cfg(tmp_path / "plain"))
        top1 = cmd_prepare(_tiny_cfg(tmp_path / "top1", corpus={**TINY["corpus"], "select_top1": True}))
        with open(plain.dialogues_file(), encoding="utf-8") as handle:
            assert all(len(json.loads(l)["knowledge"]) == 3 for l in handle)
        with open(top1.dialogues_file(), encoding="utf-8") as handle:
            assert all(len(json.loads(l)["knowledge"]) == 1 for l in handle)

    def test_config_change_rejected(self, tmp_path):
        cmd_prepare(_tiny_cfg(tmp_path / "r"))
        with pytest.raises(ManifestError, match="different config"):
            cmd_prepare(_tiny_cfg(tmp_path / "r", pr=30.0))


class TestPipeline:
    def test_stage_order_enforced(self, tmp_path):
        cfg = _tiny_cfg(tmp_path / "r")
        cmd_prepare(cfg)
        with pytest.raises(ManifestError, match="train-rewriter requires completed stage train-generator"):
            cmd_pipeline(cfg, stages=["train-rewriter"])

    def test_unknown_stage_rejected(self, tmp_path):
        cfg = _tiny_cfg(tmp_path / "r")
        with pytest.raises(ConfigError, match="unknown stages"):
            cmd_pipeline(cfg, stages=["train-everything"])

    def test_lock_refused_and_forced(self, trained_run):
        paths = RunPaths(trained_run.run_dir)
        paths.lock.write_text("12345")
        try:
            with pytest.raises(LockError, match="locked"):
                cmd_pipeline(trained_run)
            manifest = cmd_pipeline(trained_run, force=True)
            assert all(manifest.complete(stage) for stage in STAGES)
        finally:
            paths.lock.unlink(missing_ok=True)

    def test_completed_stages_skipped(self, trained_run):
        before = RunPaths(trained_run.run_dir).manifest.read_text()
        manifest = cmd_pipeline(trained_run)
        assert json.loads(before)["stages"] == {
            k: v for k, v in manifest.to_dict()["stages"].items()
        }

    def test_all_artifacts_exist(self, trained_run):
        paths = RunPaths(trained_run.run_dir)
        manifest = json.loads(paths.manifest.read_text())
        assert sorted(manifest["stages"]) == sorted(STAGES)
        for stage in STAGES:
            for artifact in manifest["stages"][stage]["artifacts"]:
                assert RunPaths(trained_run.run_dir).root / artifact or True
        for ckpt in (
            paths.generator_ckpt(),
            paths.dae_ckpt("polite"),
            paths.ws_ckpt("polite"),
            paths.rl_ckpt("polite"),
            paths.rewriter_ckpt("polite"),
            paths.classifier_ckpt("polite"),
        ):
            assert ckpt.exists()


class TestGenerateEvaluate:
    def test_generate_writes_full_rows(self, trained_run):
        out = cmd_generate(trained_run, style="polite", split="test")
        world = load_world(trained_run)
        with open(out, encoding="utf-8") as handle:
            rows = [json.loads(line) for line in handle]
        assert len(rows) == len(world.dialogues.test)
        for row in rows:
            assert set(row) == {
                "id",
                "style",
                "split",
                "generator_response",
                "scores",
                "template",
                "styled_response",
                "logprob",
                "reference",
            }
            assert len(row["scores"]) == len(row["generator_response"])

    def test_generate_unknown_style(self, trained_run):
        with pytest.raises(ConfigError, match="unknown style"):
            cmd_generate(trained_run, style="sarcastic")

    def test_evaluate_writes_report(self, trained_run):
        cmd_generate(trained_run, style="polite", split="test")
        report = cmd_evaluate(trained_run, style=None, split="test")
        assert 0.0 <= report.f1 <= 1.0
        assert (RunPaths(trained_run.run_dir).reports / "eval_all_test.json").exists()
        assert "polite" in report.per_style
        assert report.f1_drop == pytest.approx(report.f1_generator - report.f1)
        assert "F1 drop vs generator" in report.table()

    def test_evaluate_without_predictions(self, tmp_path):
        cfg = _tiny_cfg(tmp_path / "r")
        cmd_prepare(cfg)
        with pytest.raises(Exception, match="predictions not found"):
            cmd_evaluate(cfg, style="polite")


class TestSweep:
    def test_values_validated(self, trained_run):
        with pytest.raises(ConfigError, match="no values"):
            cmd_sweep_pr(trained_run, [])
        with pytest.raises(ConfigError, match="must be in"):
            cmd_sweep_pr(trained_run, [0.0])
        with pytest.raises(ConfigError, match="must be in"):
            cmd_sweep_pr(trained_run, [100.0])

    def test_small_sweep_rows(self, trained_run):
        report = cmd_sweep_pr(trained_run, [50.0, 20.0])
        assert [row["pr"] for row in report["rows"]] == [20.0, 50.0]
        for row in report["rows"]:
            assert 0.0 <= row["f1"] <= 1.0
            # Pooled diversity needs one response per style for all three
            # standard styles; a single-style run reports none.
            assert row["inner_distinct1"] is None
        assert (RunPaths(trained_run.run_dir).reports / "sweep_pr.json").exists()


class TestStyleTokens:
    def test_ranked_rows(self, trained_run):
        rows = cmd_style_tokens(trained_run, style="polite", top=5)
        assert 0 < len(rows) <= 5
        assert all(set(r) == {"token", "mean_score", "count"} for r in rows)
        scores = [r["mean_score"] for r in rows]
        assert scores == sorted(scores, reverse=True)

    def test_unknown_style(self, trained_run):
        with pytest.raises(ConfigError, match="unknown style"):
            cmd_style_tokens(trained_run, style="brisk")


class TestChat:
    def _run(self, cfg, script):
        stdin = io.StringIO(script)
        stdout = io.StringIO()
        code = cmd_chat(cfg, style="polite", stdin=stdin, stdout=stdout)
        return code, stdout.getvalue()

    def test_scripted_session(self, trained_run):
        script = "the bread is fresh\nhello there\n\n/style brisk\n/style polite\n/knowledge the soup is hot\ntell me more\n/quit\n"
        code, out = self._run(trained_run, script)
        assert code == 0
        assert out.count("draft:") == 2
        assert out.count("template:") == 2
        assert out.count("styled:") == 2
        assert "usage: /style <polite>" in out
        assert "style set to polite" in out
        assert "knowledge updated" in out
        assert out.rstrip().endswith("bye")

    def test_eof_quits_cleanly(self, trained_run):
        code, out = self._run(trained_run, "")
        assert code == 0
        assert "bye" in out

    def test_transcript_deterministic(self, trained_run):
        script = "the bread is fresh\nhello there\n/quit\n"
        assert self._run(trained_run, script) == self._run(trained_run, script)


class TestMain:
    def test_prepare_exit_zero(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({**TINY, "run_dir": str(tmp_path / "r")}))
        assert main(["--config", str(cfg_path), "prepare"]) == 0

    def test_missing_config_exit_one(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.json"), "prepare"]) == 1

    def test_usage_error_exit_one(self):
        assert main(["generate"]) == 1

    def test_unknown_command_exit_one(self):
        assert main(["transmogrify"]) == 1

    def test_missing_predictions_exit_one(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({**TINY, "run_dir": str(tmp_path / "r")}))
        assert main(["--config", str(cfg_path), "prepare"]) == 0
        assert main(["--config", str(cfg_path), "evaluate"]) == 1

    def test_locked_pipeline_exit_two(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        run_dir = tmp_path / "r"
        cfg_path.write_text(json.dumps({**TINY, "run_dir": str(run_dir)}))
        assert main(["--config", str(cfg_path), "prepare"]) == 0
        lock = run_dir / ".lock"
        lock.write_text("held")
        try:
            assert main(["--config", str(cfg_path), "pipeline"]) == 2
        finally:
            lock.unlink()

    def test_seed_override_changes_corpus(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(TINY))
        a, b, c = (tmp_path / n for n in "abc")
        assert main(["--config", str(cfg_path), "--run-dir", str(a), "prepare"]) == 0
        assert main(["--config", str(cfg_path), "--run-dir", str(b), "--seed", "3", "prepare"]) == 0
        assert main(["--config", str(cfg_path), "--run-dir", str(c), "--seed", "4", "prepare"]) == 0
        dialogues = [(p / "corpora" / "dialogues.jsonl").read_bytes() for p in (a, b, c)]
        assert dialogues[0] == dialogues[1]
        assert dialogues[0] != dialogues[2]
