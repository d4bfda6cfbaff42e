"""Tests for Command Executor module."""
import os
import sys
import time

import psutil
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from modules.command_executor import CommandExecutor, ExecutionRequest, build_environment
from utils.errors import ExecutionError


@pytest.fixture
def executor():
    return CommandExecutor(kill_grace_seconds=0.5)


def test_captures_exit_and_output(executor, tmp_path):
    result = executor.execute(ExecutionRequest("echo out; echo err >&2; exit 3", tmp_path))
    assert result.exit_code == 3
    assert result.stdout == b"out\n"
    assert result.stderr == b"err\n"
    assert not result.timed_out
    assert result.terminated_by_signal is None
    assert not result.succeeded()
    assert result.describe() == "exit 3"


def test_runs_in_workspace(executor, tmp_path):
    (tmp_path / "marker").write_text("x")
    result = executor.execute(ExecutionRequest("ls", tmp_path))
    assert result.succeeded()
    assert b"marker" in result.stdout


def test_argv_form(executor, tmp_path):
    """Sequences run without a shell."""
    result = executor.execute(ExecutionRequest(["echo", "a && b"], tmp_path))
    assert result.stdout == b"a && b\n"


def test_stdin_is_empty(executor, tmp_path):
    """Commands that read stdin see EOF instead of blocking."""
    result = executor.execute(ExecutionRequest("cat; echo done", tmp_path, timeout_ms=5000))
    assert result.succeeded()
    assert result.stdout == b"done\n"


def test_minimal_environment(executor, tmp_path, monkeypatch):
    """Only PATH, HOME, LANG and explicit variables reach the child."""
    monkeypatch.setenv("SECRET_TOKEN", "hunter2")
    result = executor.execute(ExecutionRequest("env", tmp_path, env={"EXTRA": "1"}))
    names = {line.split("=", 1)[0] for line in result.stdout.decode().splitlines()}
    assert "SECRET_TOKEN" not in names
    assert {"PATH", "HOME", "LANG", "EXTRA"} <= names


def test_build_environment_overrides():
    env = build_environment({"LANG": "en_US.UTF-8"})
    assert env["LANG"] == "en_US.UTF-8"
    assert set(env) == {"PATH", "HOME", "LANG"}


def test_timeout_kills_process_group(executor, tmp_path):
    """A timed-out command and its children are gone when execute returns."""
    started = time.monotonic()
    result = executor.execute(ExecutionRequest("sleep 30 & sleep 30; wait", tmp_path, timeout_ms=300))
    assert result.timed_out
    assert result.exit_code is None
    assert result.terminated_by_signal is None
    assert result.describe() == "timed out"
    assert time.monotonic() - started < 10


def test_timeout_escalates_to_sigkill(executor, tmp_path):
    """A child ignoring SIGTERM is killed after the grace period."""
    result = executor.execute(ExecutionRequest("trap '' TERM; sleep 30", tmp_path, timeout_ms=200))
    assert result.timed_out


def test_signal_death_is_reported(executor, tmp_path):
    result = executor.execute(ExecutionRequest("kill -9 $$", tmp_path))
    assert result.terminated_by_signal == 9
    assert result.exit_code is None
    assert not result.succeeded()


def test_output_cap_truncates(executor, tmp_path):
    """Output beyond the cap is dropped and flagged; the child still finishes."""
    result = executor.execute(ExecutionRequest("head -c 100000 /dev/zero", tmp_path, output_cap=1000))
    assert result.succeeded()
    assert len(result.stdout) == 1000
    assert result.stdout_truncated
    assert not result.stderr_truncated


def test_output_at_cap_is_not_truncated(executor, tmp_path):
    result = executor.execute(ExecutionRequest("printf abcd", tmp_path, output_cap=4))
    assert result.stdout == b"abcd"
    assert not result.stdout_truncated


def test_missing_program_is_exit_127(executor, tmp_path):
    """A missing program inside a shell command is an ordinary exit status."""
    result = executor.execute(ExecutionRequest("definitely-not-a-program-xyz", tmp_path))
    assert result.exit_code == 127


def test_spawn_failure(executor, tmp_path):
    with pytest.raises(ExecutionError) as exc_info:
        executor.execute(ExecutionRequest(["/nonexistent/program"], tmp_path))
    assert exc_info.value.code == "SPAWN_FAILED"


def test_invalid_cwd(executor, tmp_path):
    with pytest.raises(ExecutionError) as exc_info:
        executor.execute(ExecutionRequest("ls", tmp_path / "missing"))
    assert exc_info.value.code == "INVALID_CWD"


@pytest.mark.parametrize("kwargs", [{"timeout_ms": 0}, {"output_cap": -1}, {"command": "  "}])
def test_invalid_request(executor, tmp_path, kwargs):
    params = {"command": "ls", "cwd": tmp_path, **kwargs}
    with pytest.raises(ExecutionError) as exc_info:
        executor.execute(ExecutionRequest(**params))
    assert exc_info.value.code == "INVALID_REQUEST"


def test_result_to_dict_has_counts(executor, tmp_path):
    data = executor.execute(ExecutionRequest("printf hi", tmp_path)).to_dict()
    assert data["stdout_bytes"] == 2
    assert "stdout" not in data


def test_floods_on_both_streams_do_not_deadlock(executor, tmp_path):
    """Both pipes are drained concurrently; each is capped on its own."""
    result = executor.execute(
        ExecutionRequest(
            "head -c 5000000 /dev/zero & head -c 5000000 /dev/zero >&2; wait",
            tmp_path,
            timeout_ms=30000,
            output_cap=4096,
        )
    )
    assert result.succeeded()
    assert not result.timed_out
    assert len(result.stdout) == len(result.stderr) == 4096
    assert result.stdout_truncated and result.stderr_truncated


def _leftovers(marker):
    found = []
    for proc in psutil.process_iter(["cmdline"]):
        if marker in " ".join(proc.info["cmdline"] or []):
            found.append(proc)
    return found


def test_timeout_leaves_no_zombies_or_orphans(executor, tmp_path):
    marker = "sleep 37.25"
    result = executor.execute(ExecutionRequest(f"{marker} & {marker} & wait", tmp_path, timeout_ms=300))
    assert result.timed_out

    deadline = time.monotonic() + 5
    while _leftovers(marker) and time.monotonic() < deadline:
        time.sleep(0.05)
    assert _leftovers(marker) == []
    for child in psutil.Process().children(recursive=True):
        try:
            assert child.status() != psutil.STATUS_ZOMBIE, child
        except psutil.NoSuchProcess:
            pass
