"""
Command Executor Module.

Runs one command as a child process inside the workspace, capturing exit
status, output and timing under a timeout.

Environment contract:
    The child sees only PATH, HOME and LANG (taken from the parent, with
    fallbacks) plus whatever the request passes explicitly in ``env``.

Termination:
    On timeout the whole process group gets SIGTERM, then SIGKILL after a
    fixed grace period. Processes left in the group after the main child exits
    are killed too, so no stragglers outlive a call.
"""
import os
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Dict, List, Optional, Sequence, Union

from utils.constants import (
    DEFAULT_LANG,
    DEFAULT_OUTPUT_CAP,
    DEFAULT_PATH,
    DEFAULT_TIMEOUT_MS,
    KILL_GRACE_SECONDS,
    SHELL,
)
from utils.errors import ExecutionError
from utils.logger import get_logger

logger = get_logger(__name__)

_READ_CHUNK = 64 * 1024

Command = Union[str, Sequence[str]]


@dataclass
class ExecutionRequest:
    """A command to execute."""

    command: Command
    cwd: Path
    env: Dict[str, str] = field(default_factory=dict)
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    output_cap: int = DEFAULT_OUTPUT_CAP

    def validate(self) -> None:
        """
        Check request invariants.

        Raises:
            ExecutionError: INVALID_CWD or INVALID_REQUEST.
        """
        if self.timeout_ms <= 0 or self.output_cap <= 0:
            raise ExecutionError(
                "INVALID_REQUEST",
                "timeout_ms and output_cap must be positive",
                {"timeout_ms": self.timeout_ms, "output_cap": self.output_cap},
            )
        if isinstance(self.command, str):
            if not self.command.strip():
                raise ExecutionError("INVALID_REQUEST", "command is empty")
        elif not self.command:
            raise ExecutionError("INVALID_REQUEST", "argv is empty")
        if not Path(self.cwd).is_dir():
            raise ExecutionError("INVALID_CWD", f"working directory {self.cwd} does not exist", {"cwd": str(self.cwd)})


@dataclass(frozen=True)
class ExecutionResult:
    """Outcome of one execution."""

    exit_code: Optional[int]
    terminated_by_signal: Optional[int]
    timed_out: bool
    stdout: bytes
    stderr: bytes
    stdout_truncated: bool
    stderr_truncated: bool
    wall_time_ms: float

    def succeeded(self) -> bool:
        """Exit status 0, no signal, no timeout."""
        return self.exit_code == 0 and not self.timed_out and self.terminated_by_signal is None

    def describe(self) -> str:
        """Short description of how the process ended."""
        if self.timed_out:
            return "timed out"
        if self.terminated_by_signal is not None:
            return f"killed by signal {self.terminated_by_signal}"
        return f"exit {self.exit_code}"

    def to_dict(self) -> Dict[str, object]:
        """Serialize without the raw output bytes."""
        return {
            "exit_code": self.exit_code,
            "terminated_by_signal": self.terminated_by_signal,
            "timed_out": self.timed_out,
            "stdout_bytes": len(self.stdout),
            "stderr_bytes": len(self.stderr),
            "stdout_truncated": self.stdout_truncated,
            "stderr_truncated": self.stderr_truncated,
            "wall_time_ms": round(self.wall_time_ms, 3),
        }


class _StreamDrain(threading.Thread):
    """Reads a pipe to EOF, keeping at most ``cap`` bytes."""

    def __init__(self, stream: IO[bytes], cap: int):
        super().__init__(daemon=True)
        self.stream = stream
        self.cap = cap
        self.chunks: List[bytes] = []
        self.kept = 0
        self.truncated = False

    def run(self) -> None:
        try:
            while True:
                read = getattr(self.stream, "read1", self.stream.read)
                chunk = read(_READ_CHUNK)
                if not chunk:
                    break
                room = self.cap - self.kept
                if room > 0:
                    piece = chunk[:room]
                    self.chunks.append(piece)
                    self.kept += len(piece)
                if len(chunk) > max(room, 0):
                    self.truncated = True
        except (OSError, ValueError):
            pass

    @property
    def data(self) -> bytes:
        return b"".join(self.chunks)


def build_environment(extra: Optional[Dict[str, str]] = None, cwd: Optional[Path] = None) -> Dict[str, str]:
    """
    Build the child environment: the minimal base plus explicit variables.

    Args:
        extra: Variables requested explicitly.
        cwd: Fallback HOME when the parent has none.

    Returns:
        The environment mapping for the child.
    """
    env = {
        "PATH": os.environ.get("PATH") or DEFAULT_PATH,
        "HOME": os.environ.get("HOME") or str(cwd or "/"),
        "LANG": DEFAULT_LANG,
    }
    env.update(extra or {})
    return env


class CommandExecutor:
    """Spawn commands with timeouts and bounded output capture."""

    def __init__(self, shell: str = SHELL, kill_grace_seconds: float = KILL_GRACE_SECONDS):
        """
        Initialize the executor.

        Args:
            shell: Shell used for string commands.
            kill_grace_seconds: Time between SIGTERM and SIGKILL on timeout.
        """
        self.shell = shell
        self.kill_grace_seconds = kill_grace_seconds

    def execute(self, req: ExecutionRequest) -> ExecutionResult:
        """
        Run a command to completion or timeout.

        String commands run through the shell non-interactively; sequences run
        as argv directly. Stdin is always empty.

        Raises:
            ExecutionError: SPAWN_FAILED, INVALID_CWD or INVALID_REQUEST.
        """
        req.validate()
        argv = [self.shell, "-c", req.command] if isinstance(req.command, str) else list(req.command)
        env = build_environment(req.env, Path(req.cwd))

        started = time.perf_counter()
        try:
            proc = subprocess.Popen(
                argv,
                cwd=str(req.cwd),
                env=env,
                stdin=subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                start_new_session=True,
                close_fds=True,
            )
        except OSError as e:
            raise ExecutionError(
                "SPAWN_FAILED",
                f"cannot start {argv[0]!r}: {e.strerror or e}",
                {"program": argv[0], "errno": e.errno},
            )

        assert proc.stdout is not None and proc.stderr is not None
        out_drain = _StreamDrain(proc.stdout, req.output_cap)
        err_drain = _StreamDrain(proc.stderr, req.output_cap)
        out_drain.start()
        err_drain.start()

        timed_out = False
        try:
            proc.wait(timeout=req.timeout_ms / 1000.0)
        except subprocess.TimeoutExpired:
            timed_out = True
            logger.warning("command timed out after %d ms; terminating process group %d", req.timeout_ms, proc.pid)
            self._signal_group(proc.pid, signal.SIGTERM)
            try:
                proc.wait(timeout=self.kill_grace_seconds)
            except subprocess.TimeoutExpired:
                self._signal_group(proc.pid, signal.SIGKILL)
                proc.wait()
        wall_time_ms = (time.perf_counter() - started) * 1000.0

        # Anything still in the group (background children) holds the pipes open.
        self._signal_group(proc.pid, signal.SIGKILL)
        out_drain.join(timeout=self.kill_grace_seconds)
        err_drain.join(timeout=self.kill_grace_seconds)
        proc.stdout.close()
        proc.stderr.close()

        returncode = proc.returncode
        exit_code: Optional[int] = None
        terminated_by_signal: Optional[int] = None
        if not timed_out:
            if returncode is not None and returncode < 0:
                terminated_by_signal = -returncode
            else:
                exit_code = returncode

        result = ExecutionResult(
            exit_code=exit_code,
            terminated_by_signal=terminated_by_signal,
            timed_out=timed_out,
            stdout=out_drain.data,
            stderr=err_drain.data,
            stdout_truncated=out_drain.truncated,
            stderr_truncated=err_drain.truncated,
            wall_time_ms=wall_time_ms,
        )
        logger.debug("command finished: %s in %.1f ms", result.describe(), wall_time_ms)
        return result

    @staticmethod
    def _signal_group(pgid: int, sig: int) -> None:
        try:
            os.killpg(pgid, sig)
        except (ProcessLookupError, PermissionError):
            pass


def execute(req: ExecutionRequest) -> ExecutionResult:
    """Run a request with a default executor."""
    return CommandExecutor().execute(req)
