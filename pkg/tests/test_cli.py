import json

import numpy as np
import pytest

from wiplab import ffv
from wiplab.cli import main
from wiplab.config import ConfigInvalid, RunConfig

TINY = [
    "--set", "ppo.iterations=2", "--set", "ppo.n_env=4",
    "--set", "ppo.horizon=16", "--set", "ppo.minibatches=2",
    "--set", "ppo.epochs=1", "--set", "episode.t_max=120",
    "--set", "eval.episodes=4",
]


def make_cache_file(path, rng, n_img=4, n_txt=3, dim=6):
    records = []
    for i in range(n_img):
        records.append(ffv.EmbeddingRecord(
            f"img_{i:02d}", "image", rng.standard_normal(dim),
            {"path": f"surf/{i}.jpg", "cof": 0.3 + 0.1 * i}))
    for i in range(n_txt):
        records.append(ffv.EmbeddingRecord(
            f"txt_{i:02d}", "text", rng.standard_normal(dim),
            {"material": f"mat{i}", "against": "rubber", "cof": 0.2 + 0.2 * i}))
    cache = ffv.EmbeddingCache(dim, records, {"encoder": "fixture"})
    cache.save(path)
    return cache


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigInvalid):
            RunConfig.load(overrides=["nonexistent.key=1"])

    def test_missing_file_is_config_error(self, capsys):
        rc = main(["--config", "/nonexistent/path.yaml", "train", "--out", "/tmp/x"])
        assert rc == 2
        assert "/nonexistent/path.yaml" in capsys.readouterr().err

    def test_snapshot_contains_overrides(self):
        cfg = RunConfig.load(overrides=["ppo.iterations=7"])
        assert cfg.data["ppo"]["iterations"] == 7
        assert "iterations: 7" in cfg.snapshot_yaml()


class TestTrainCommand:
    def test_deterministic_checkpoints(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = main(TINY + ["train", "--variant", "ours", "--seed", "7",
                              "--out", str(out)])
            assert rc == 0
            outs.append(out)
        ck_a = (outs[0] / "checkpoint.ckpt").read_bytes()
        ck_b = (outs[1] / "checkpoint.ckpt").read_bytes()
        assert ck_a == ck_b
        assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
        assert (outs[0] / "manifest.yaml").exists()

    def test_student_requires_teacher(self, tmp_path, capsys):
        rc = main(TINY + ["train", "--variant", "student", "--out", str(tmp_path / "s")])
        assert rc == 2
        assert "--teacher" in capsys.readouterr().err

    def test_teacher_then_student(self, tmp_path):
        t_out = tmp_path / "teacher"
        assert main(TINY + ["train", "--variant", "teacher", "--seed", "3",
                            "--out", str(t_out)]) == 0
        s_out = tmp_path / "student"
        rc = main(TINY + ["--set", "distill.collect_steps=40",
                          "--set", "distill.epochs=2", "--set", "distill.holdout_envs=1",
                          "train", "--variant", "student", "--seed", "3",
                          "--teacher", str(t_out / "checkpoint.ckpt"),
                          "--out", str(s_out)])
        assert rc == 0
        assert (s_out / "checkpoint.ckpt").exists()
        assert (s_out / "distill_report.json").exists()


class TestEvalCommands:
    @pytest.fixture(scope="class")
    def ckpt(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("train") / "run"
        assert main(TINY + ["train", "--variant", "ours", "--seed", "5",
                            "--out", str(out)]) == 0
        return out / "checkpoint.ckpt"

    def test_eval_missing_checkpoint(self, tmp_path, capsys):
        rc = main(TINY + ["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                          "--out", str(tmp_path / "out")])
        assert rc == 1

    def test_eval_writes_records_and_summary(self, ckpt, tmp_path):
        out = tmp_path / "eval"
        rc = main(TINY + ["eval", "--checkpoint", str(ckpt), "--episodes", "3",
                          "--out", str(out)])
        assert rc == 0
        assert (out / "records.jsonl").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["episodes"] == 3

    def test_eval_lqr_deterministic(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = main(TINY + ["eval", "--lqr", "--episodes", "3", "--seed", "9",
                              "--out", str(out)])
            assert rc == 0
            outs.append((out / "records.jsonl").read_bytes())
        assert outs[0] == outs[1]

    def test_sweep_rows(self, ckpt, tmp_path):
        out = tmp_path / "sweep"
        rc = main(TINY + ["sweep", "--checkpoint", str(ckpt),
                          "--mu-input", "0.5,1.0,1.5", "--mu-actual", "1.0",
                          "--trials", "2", "--out", str(out)])
        assert rc == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert len(lines) == 4 and lines[0].startswith("mu_input")

    def test_compare_and_export(self, ckpt, tmp_path):
        out = tmp_path / "cmp"
        rc = main(TINY + ["compare", "--checkpoint", f"ours={ckpt}", "--lqr",
                          "--episodes", "3", "--out", str(out)])
        assert rc == 0
        assert (out / "records_ours.jsonl").exists()
        assert (out / "records_lqr.jsonl").exists()
        rc = main(["export", "--run-dir", str(out)])
        assert rc == 0
        exported = list((out / "plot_data").glob("trajectory_*.csv"))
        assert exported


class TestEstimateCommand:
    @pytest.fixture()
    def cache_path(self, tmp_path, rng):
        path = tmp_path / "cache.jsonl"
        make_cache_file(path, rng)
        return path

    def test_mock_estimate(self, cache_path, tmp_path, capsys):
        fx = tmp_path / "ice.txt"
        fx.write_text("Looks icy. CoF: 0.12")
        rc = main(["estimate", "--embedding-id", "img_00",
                   "--cache", str(cache_path), "--mock", str(fx)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "mu_hat: 0.12" in out

    def test_live_needs_api_key(self, cache_path, capsys, monkeypatch):
        monkeypatch.delenv("FFV_API_KEY", raising=False)
        rc = main(["estimate", "--embedding-id", "img_00",
                   "--cache", str(cache_path), "--live"])
        assert rc == 2
        assert "FFV_API_KEY" in capsys.readouterr().err

    def test_validate_cache_ok(self, cache_path, capsys):
        rc = main(["estimate", "--cache", str(cache_path), "--validate-cache"])
        assert rc == 0
        assert "cache ok" in capsys.readouterr().out

    def test_validate_cache_malformed(self, cache_path, capsys):
        lines = cache_path.read_text().splitlines()
        rec = json.loads(lines[2])
        rec["vector"] = rec["vector"][:-1]
        lines[2] = json.dumps(rec)
        cache_path.write_text("\n".join(lines) + "\n")
        rc = main(["estimate", "--cache", str(cache_path), "--validate-cache"])
        assert rc == 1
        assert rec["id"] in capsys.readouterr().err

    def test_build_cache_merge(self, tmp_path, rng):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        ca = make_cache_file(a, rng, n_img=2, n_txt=1)
        records = [ffv.EmbeddingRecord("other_0", "text", rng.standard_normal(6),
                                       {"material": "x", "against": "y", "cof": 0.5})]
        ffv.EmbeddingCache(6, records, {"encoder": "fixture"}).save(b)
        out = tmp_path / "merged.jsonl"
        rc = main(["build-cache", "--records", str(a), str(b), "--out", str(out)])
        assert rc == 0
        merged, warnings = ffv.load_cache(out)
        assert merged.n_image == 2 and merged.n_text == 2
        assert warnings == []
