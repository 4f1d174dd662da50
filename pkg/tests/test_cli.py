import json

import pytest
import yaml

from debiaskit.cli import build_parser, main


@pytest.fixture()
def config_file(tmp_path):
    from debiaskit.pipeline import default_synth_config

    raw = default_synth_config(seed=3, train_count=120, test_count=40,
                               conflict_ratio=0.05).to_dict()
    raw["biased_training"]["epochs"] = 2
    raw["debias_training"]["epochs"] = 2
    raw["extraction"] = {"k": 5}
    raw["generation"]["size"] = 32
    raw["generation"]["target"] = 10
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


class TestParser:
    def test_all_stage_subcommands_exist(self):
        parser = build_parser()
        for cmd in ("synth", "train-biased", "extract", "caption", "filter",
                    "generate", "assemble", "train-debiased", "evaluate",
                    "report", "run-all", "serve"):
            args = parser.parse_args(
                [cmd] + ([] if cmd == "serve" else ["--run-dir", "x"])
            )
            assert args.command == cmd

    def test_common_flags(self):
        parser = build_parser()
        args = parser.parse_args([
            "run-all", "--run-dir", "d", "--config", "c.yaml", "--seed", "9",
            "--deterministic", "--trials", "3", "--resume",
        ])
        assert args.seed == 9
        assert args.deterministic
        assert args.trials == 3
        assert args.resume


class TestLocalExecution:
    def test_stage_by_stage(self, config_file, tmp_path, capsys):
        run_dir = tmp_path / "run"
        rc = main(["synth", "--config", str(config_file), "--run-dir", str(run_dir)])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["stage"] == "synth"
        assert out["record"]["status"] == "completed"
        rc = main(["train-biased", "--config", str(config_file), "--run-dir", str(run_dir)])
        assert rc == 0
        assert (run_dir / "checkpoints" / "biased.pt").exists()

    def test_missing_upstream_is_clean_error(self, config_file, tmp_path, capsys):
        run_dir = tmp_path / "run"
        main(["synth", "--config", str(config_file), "--run-dir", str(run_dir)])
        capsys.readouterr()
        rc = main(["extract", "--config", str(config_file), "--run-dir", str(run_dir)])
        assert rc == 1
        assert "train-biased" in capsys.readouterr().err

    def test_run_all_local(self, config_file, tmp_path, capsys):
        run_dir = tmp_path / "run"
        rc = main(["run-all", "--config", str(config_file), "--run-dir", str(run_dir)])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert "metrics" in payload
        assert payload["metrics"]["debiased.test.n_test"] == 40
        assert (run_dir / "report" / "comparison.txt").exists()

    def test_seed_override_changes_snapshot(self, config_file, tmp_path):
        run_dir = tmp_path / "run"
        main(["synth", "--config", str(config_file), "--run-dir", str(run_dir),
              "--seed", "77"])
        stored = json.loads((run_dir / "run.json").read_text())
        assert stored["config"]["seed"] == 77


class TestHttpExecution:
    def test_run_all_against_live_server(self, config_file, tmp_path, capsys):
        from debiaskit.service import create_app
        from stubs import run_server

        app = create_app(runs_root=tmp_path / "runs")
        with run_server(app) as url:
            rc = main([
                "run-all", "--config", str(config_file),
                "--run-dir", str(tmp_path / "runs" / "cli-run"), "--server", url,
            ])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert "metrics" in payload
        assert payload["metrics"]["biased.test.n_test"] == 40
