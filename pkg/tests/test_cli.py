"""CLI tests: argument handling, config precedence, artifact layout, error JSON.

The heavy subcommands run once on a miniature experiment through main() so the
console path from flags to files is exercised for real.
"""

import json
from pathlib import Path

import pytest

from cpadapt import ConfigError, cli, harness


def parse(argv):
    return cli.build_parser().parse_args(argv)


class TestParsing:
    def test_subcommand_and_flags(self):
        args = parse(["eval-online", "--seed", "4", "--out", "d", "--beam", "7", "--trials", "2"])
        assert args.command == "eval-online"
        assert args.seed == 4 and args.out == "d" and args.beam == 7 and args.trials == 2

    def test_missing_subcommand_raises(self):
        with pytest.raises(ConfigError):
            parse([])

    def test_unknown_method_raises(self):
        with pytest.raises(ConfigError):
            parse(["eval-online", "--method", "gp"])


class TestResolveConfig:
    def test_flags_override_config_file(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        harness.save_config(path, harness.ExperimentConfig(seed=1, trials=5))
        cfg = cli.resolve_config(parse(["train", "--config", str(path), "--seed", "9"]))
        assert cfg.seed == 9
        assert cfg.trials == 5
        assert cfg.scenario == "train"

    def test_beam_override_reaches_adapt_config(self):
        cfg = cli.resolve_config(parse(["eval-online", "--beam", "11"]))
        assert cfg.adapt.beam_size == 11

    def test_report_keeps_configured_scenario(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        harness.save_config(path, harness.ExperimentConfig(scenario="closed-loop"))
        cfg = cli.resolve_config(parse(["report", "--config", str(path)]))
        assert cfg.scenario == "closed-loop"

    def test_invalid_override_rejected(self):
        with pytest.raises(ConfigError):
            cli.resolve_config(parse(["eval-online", "--beam", "0"]))


@pytest.fixture(scope="module")
def mini_workspace(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    cfg_path = out / "cfg.yaml"
    harness.save_config(
        cfg_path,
        harness.ExperimentConfig(
            seed=5, out_dir=str(out), trials=1, n_trajectories=3, trajectory_length=30
        ),
    )
    assert cli.main(["gen-data", "--config", str(cfg_path)]) == 0
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    return out, cfg_path


class TestSubcommands:
    def test_gen_and_train_artifacts(self, mini_workspace):
        out, _ = mini_workspace
        assert (out / "splits.json").exists()
        assert (out / "model.json").exists()
        assert (out / "config.yaml").exists()

    def test_eval_online_payload_and_files(self, mini_workspace, capsys):
        out, cfg_path = mini_workspace
        code = cli.main(["eval-online", "--config", str(cfg_path), "--method", "offline_only"])
        payload = json.loads(capsys.readouterr().out)
        assert code == 0
        assert payload["offline_only"]["n"] == 1
        assert (out / "eval" / "report.csv").exists()
        assert (out / "eval" / "summary.json").exists()

    def test_report_matches_written_summary(self, mini_workspace, capsys):
        out, cfg_path = mini_workspace
        code = cli.main(["report", "--config", str(cfg_path)])
        payload = json.loads(capsys.readouterr().out)
        assert code == 0
        stored = harness.read_summary(out / "eval" / "summary.json")
        assert payload["offline_only"]["crmse_mean"] == stored["offline_only"]["crmse_mean"]

    def test_rebuild_summary_rejects_empty(self, tmp_path):
        path = tmp_path / "report.csv"
        path.write_text("trajectory,method,crmse\n")
        with pytest.raises(ConfigError):
            cli.rebuild_summary(path)


class TestErrorPaths:
    def test_missing_model_is_json_error(self, tmp_path, capsys):
        code = cli.main(["eval-online", "--out", str(tmp_path / "empty")])
        captured = capsys.readouterr()
        err = json.loads(captured.err)
        assert code == 1
        assert err["error"] == "ConfigError"
        assert "train" in err["message"]
        assert captured.out == ""

    def test_bad_subcommand_is_json_error(self, capsys):
        code = cli.main(["defrag"])
        err = json.loads(capsys.readouterr().err)
        assert code == 1
        assert err["error"] == "ConfigError"

    def test_unknown_config_key_is_json_error(self, tmp_path, capsys):
        path = tmp_path / "cfg.yaml"
        path.write_text("beam: 5\n")
        code = cli.main(["gen-data", "--config", str(path)])
        err = json.loads(capsys.readouterr().err)
        assert code == 1
        assert "unknown config keys" in err["message"]

    def test_missing_report_is_json_error(self, tmp_path, capsys):
        code = cli.main(["report", "--out", str(tmp_path)])
        err = json.loads(capsys.readouterr().err)
        assert code == 1
        assert "eval-online" in err["message"]
