"""Tests for the command-line interface."""
import argparse
import json
import os
import sys

import pytest
import yaml

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import cli as cli_module
from cli import CliConfig, SandboxCLI
from modules.snapshot_store import SnapshotStore


@pytest.fixture
def cli():
    return SandboxCLI()


@pytest.fixture
def base_args(workspace, store):
    return ["--workspace", str(workspace), "--store", str(store)]


def _json(capsys):
    out = capsys.readouterr().out
    return json.loads(out)


def test_run_exit_codes(cli, base_args, workspace):
    assert cli.run(base_args + ["run", "--", "ls"]) == 0
    assert cli.run(base_args + ["run", "--", "rm", "-rf", "/"]) == 3
    assert cli.run(base_args + ["run", "--", "sh", "-c", "echo x > README.md; exit 1"]) == 4
    assert cli.run(base_args + ["run", "touch made.txt"]) == 0
    assert (workspace / "made.txt").exists()
    assert (workspace / "README.md").read_text() == "# demo\n"


def test_run_json_is_one_document(cli, base_args, capsys):
    assert cli.run(base_args + ["--json", "run", "--", "cat", "README.md"]) == 0
    captured = capsys.readouterr()
    document = json.loads(captured.out)
    assert document["outcome"] == "EXECUTED_SAFE"
    assert document["stdout"] == "# demo\n"
    assert document["decision"]["class"] == "SAFE"
    assert "EXECUTED_SAFE" in captured.err


def test_run_human_output(cli, base_args, capsys):
    assert cli.run(base_args + ["run", "--", "rm", "-rf", "/"]) == 3
    err = capsys.readouterr().err
    assert "BLOCKED" in err
    assert "rm-recursive-root" in err


def test_run_env_flag(cli, base_args, capsys):
    assert cli.run(base_args + ["--json", "run", "--env", "GREETING=hi", "--", "sh", "-c", "echo $GREETING"]) == 0
    assert _json(capsys)["stdout"] == "hi\n"


def test_usage_errors(cli, base_args):
    assert cli.run([]) == 2
    assert cli.run(["--no-such-flag"]) == 2
    assert cli.run(base_args + ["run"]) == 2
    assert cli.run(base_args + ["run", "--env", "bad", "--", "ls"]) == 2
    assert cli.run(base_args + ["run", "--", "echo 'open"]) == 2
    assert cli.run(["--help"]) == 0


def test_missing_workspace_is_runtime_error(cli, tmp_path):
    assert cli.run(["--workspace", str(tmp_path / "missing"), "--store", str(tmp_path / "s"), "run", "ls"]) == 1


def test_policy_check(cli, capsys):
    assert cli.run(["policy-check", "pip install x && rm -rf /"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "UNSAFE"
    assert "rm-recursive-root" in out

    assert cli.run(["--json", "policy-check", "ls", "-la"]) == 0
    document = _json(capsys)
    assert document["class"] == "SAFE"
    assert document["command"] == "ls -la"


def test_policy_check_bad_policy(cli, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("rules: [")
    assert cli.run(["--policy", str(bad), "policy-check", "ls"]) == 2


def test_journal_listing_and_filters(cli, base_args, capsys):
    for command in ("ls", "rm -rf /", "touch a.txt", "touch b.txt; exit 1"):
        cli.run(base_args + ["run", command])
    capsys.readouterr()

    assert cli.run(base_args + ["--json", "journal"]) == 0
    assert _json(capsys)["count"] == 4

    assert cli.run(base_args + ["--json", "journal", "--outcome", "rolled_back"]) == 0
    document = _json(capsys)
    assert document["count"] == 1
    assert document["entries"][0]["record"]["command_raw"] == "touch b.txt; exit 1"

    assert cli.run(base_args + ["--json", "journal", "--since", "2000-01-01T00:00:00"]) == 0
    assert _json(capsys)["count"] == 4

    assert cli.run(base_args + ["--json", "journal", "--stats"]) == 0
    outcomes = {row["outcome"]: row["count"] for row in _json(capsys)["outcomes"]}
    assert outcomes == {"BLOCKED": 1, "COMMITTED": 1, "EXECUTED_SAFE": 1, "ROLLED_BACK": 1}

    assert cli.run(base_args + ["journal", "--since", "yesterday"]) == 2


def test_journal_missing(cli, base_args):
    assert cli.run(base_args + ["journal"]) == 2


def test_guidance(cli, capsys):
    assert cli.run(["guidance"]) == 0
    assert "transactional sandbox" in capsys.readouterr().out


def test_recover_and_reset(cli, base_args, workspace, store, capsys):
    assert cli.run(base_args + ["reset", "--ack", "nothing to do"]) == 1

    SnapshotStore().take_snapshot(workspace, store)
    assert cli.run(base_args + ["recover"]) == 5
    assert cli.run(base_args + ["run", "ls"]) == 5

    assert cli.run(base_args + ["reset", "--ack", "inspected"]) == 0
    assert cli.run(base_args + ["recover"]) == 0
    assert cli.run(base_args + ["run", "ls"]) == 0


def test_register(cli, workspace, tmp_path):
    config_path = tmp_path / "service.yaml"
    argv = ["register", "proj", str(workspace), "--alias-store", str(tmp_path / "st")]
    assert cli.run(argv + ["--service-config", str(config_path)]) == 0
    saved = yaml.safe_load(config_path.read_text())
    assert saved["workspaces"]["proj"]["root"] == str(workspace.resolve())
    assert cli.run(["register", "proj", str(workspace), "--service-config", str(config_path)]) == 1
    assert cli.run(["register", "other", str(workspace)]) == 2


def _namespace(**values):
    defaults = {
        "workspace": None,
        "store": None,
        "policy": None,
        "config": None,
        "timeout_ms": None,
        "output_cap": None,
        "verbose": 0,
    }
    defaults.update(values)
    return argparse.Namespace(**defaults)


def test_config_precedence(tmp_path, workspace):
    config_file = tmp_path / "sandbox.yaml"
    config_file.write_text(yaml.safe_dump({"timeout_ms": 1000, "output_cap": 10, "workspace": str(workspace)}))

    cfg = CliConfig.resolve(_namespace(config=str(config_file)), environ={})
    assert cfg.timeout_ms == 1000
    assert cfg.output_cap == 10
    assert cfg.workspace_root == workspace.resolve()

    cfg = CliConfig.resolve(_namespace(config=str(config_file)), environ={"SANDBOX_TIMEOUT_MS": "2000"})
    assert cfg.timeout_ms == 2000

    cfg = CliConfig.resolve(
        _namespace(config=str(config_file), timeout_ms=3000), environ={"SANDBOX_TIMEOUT_MS": "2000"}
    )
    assert cfg.timeout_ms == 3000


def test_config_default_store_is_outside_workspace(workspace):
    cfg = CliConfig.resolve(_namespace(workspace=str(workspace)), environ={})
    assert workspace.resolve() not in cfg.store_dir.parents


def test_invalid_config_file(cli, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    assert cli.run(["--config", str(bad), "guidance"]) == 2


def test_policy_check_knows_the_workspace(cli, base_args, workspace, capsys):
    assert cli.run(base_args + ["--json", "policy-check", f"rm -rf {workspace}/*"]) == 0
    document = _json(capsys)
    assert document["class"] == "UNSAFE"
    assert document["matched_rule_ids"] == ["rm-recursive-root"]


def test_overhead_bench_default_sizes(cli, monkeypatch):
    """Without --size-mb the bench covers 10, 50, 100 and 250 MiB."""
    calls = []

    def fake_bench(command, sizes, *args, **kwargs):
        calls.append(list(sizes))
        return []

    monkeypatch.setattr(cli_module, "run_overhead_bench", fake_bench)
    assert cli.run(["bench", "overhead"]) == 0
    assert calls == [[int(mb * 1024 * 1024) for mb in (10, 50, 100, 250)]]
