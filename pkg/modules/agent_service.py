"""
Agent Service Module.

Headless endpoint for agents: newline-delimited JSON requests in, one
newline-delimited JSON response per request out, in completion order.

Request::

    {"request_id": "1", "workspace": "proj", "command": "ls", "timeout_ms": 5000, "env": {}}

``id`` is accepted as an alias of ``request_id``. ``workspace`` may be a
registered alias or a directory path, and may be omitted when exactly one
workspace is registered. Control requests use ``op``: ``{"op": "describe"}``
returns sandbox guidance for the agent prompt, ``{"op": "shutdown"}`` drains
pending work and stops the service.

The service never prompts and never reads from a terminal.
"""
import base64
import json
import os
import queue
import signal
import socket
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional, Union

import yaml

from modules.policy_engine import PolicySet, default_policy, load_policy_file
from modules.transaction_manager import ExecOptions, Outcome, TransactionManager, TransactionRecord, WorkspaceHandle
from utils.constants import DEFAULT_OUTPUT_CAP, DEFAULT_QUEUE_DEPTH, DEFAULT_TIMEOUT_MS
from utils.errors import SandboxError, ServiceError
from utils.helpers import is_within, write_text_atomic
from utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

GUIDANCE = """\
You are operating inside a transactional sandbox. Every shell command you
issue is classified before it runs:

- SAFE commands (read-only tools such as ls, cat, git status) run directly.
- UNSAFE commands match a blacklist rule and are never executed. The response
  carries error_code POLICY_VIOLATION and the id of the rule that matched.
  Do not retry the same command: revise your plan and choose a different,
  non-destructive approach.
- UNCERTAIN commands run against a snapshot of the workspace. If they fail
  (non-zero exit, signal or timeout) the workspace is restored exactly and
  the response carries error_code STATE_ROLLED_BACK. None of the command's
  file changes survive, so fix the cause before trying again.
- FATAL means the workspace could not be restored; it is quarantined and
  every further command is refused until an operator resets it.

Commands run non-interactively with empty standard input. Anything that
waits for a prompt, a password or a confirmation will fail.
"""


@dataclass
class WorkspaceEntry:
    """A registered workspace."""

    root: str
    store: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"root": self.root}
        if self.store:
            data["store"] = self.store
        return data


@dataclass
class ServiceConfig:
    """Workspace registry, policy path and request defaults."""

    workspaces: Dict[str, WorkspaceEntry] = field(default_factory=dict)
    policy: Optional[str] = None
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    output_cap: int = DEFAULT_OUTPUT_CAP
    queue_depth: int = DEFAULT_QUEUE_DEPTH
    path: Optional[Path] = None

    @classmethod
    def load(cls, path: PathLike) -> "ServiceConfig":
        """
        Load a service configuration from YAML.

        Raises:
            ServiceError: INVALID_CONFIG.
        """
        config_path = Path(path)
        try:
            data = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ServiceError(
                "INVALID_CONFIG", f"cannot load service config {config_path}: {e}", {"path": str(config_path)}
            )
        if not isinstance(data, dict):
            raise ServiceError("INVALID_CONFIG", f"{config_path} must hold a mapping", {"path": str(config_path)})

        workspaces: Dict[str, WorkspaceEntry] = {}
        for alias, entry in (data.get("workspaces") or {}).items():
            if isinstance(entry, str):
                entry = {"root": entry}
            if not isinstance(entry, dict) or "root" not in entry:
                raise ServiceError("INVALID_CONFIG", f"workspace {alias!r} needs a root", {"alias": alias})
            workspaces[str(alias)] = WorkspaceEntry(root=str(entry["root"]), store=entry.get("store"))

        defaults = data.get("defaults") or {}
        return cls(
            workspaces=workspaces,
            policy=data.get("policy"),
            timeout_ms=int(defaults.get("timeout_ms", DEFAULT_TIMEOUT_MS)),
            output_cap=int(defaults.get("output_cap", DEFAULT_OUTPUT_CAP)),
            queue_depth=int(defaults.get("queue_depth", DEFAULT_QUEUE_DEPTH)),
            path=config_path,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "policy": self.policy,
            "workspaces": {alias: entry.to_dict() for alias, entry in self.workspaces.items()},
            "defaults": {
                "timeout_ms": self.timeout_ms,
                "output_cap": self.output_cap,
                "queue_depth": self.queue_depth,
            },
        }

    def save(self) -> None:
        """Write the configuration back to its file, if it has one."""
        if self.path is None:
            return
        write_text_atomic(self.path, yaml.safe_dump(self.to_dict(), sort_keys=False))


@dataclass
class AgentRequest:
    """One decoded request line."""

    request_id: Optional[str]
    op: str = "run"
    workspace: Optional[str] = None
    command: str = ""
    timeout_ms: Optional[int] = None
    env: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_line(cls, line: bytes) -> "AgentRequest":
        """
        Decode and validate a request line.

        Raises:
            ServiceError: BAD_REQUEST. ``detail["request_id"]`` carries the id
                when it could be read.
        """
        try:
            data = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ServiceError("BAD_REQUEST", f"request is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ServiceError("BAD_REQUEST", "request must be a JSON object")

        raw_id = data.get("request_id", data.get("id"))
        request_id = None if raw_id is None or isinstance(raw_id, (dict, list, bool)) else str(raw_id)

        def bad(message: str) -> ServiceError:
            return ServiceError("BAD_REQUEST", message, {"request_id": request_id})

        op = data.get("op", "run")
        if op not in ("run", "describe", "shutdown"):
            raise bad(f"unknown op {op!r}")
        if op != "run":
            return cls(request_id=request_id, op=op)

        if not request_id:
            raise bad("request_id is required")
        command = data.get("command")
        if not isinstance(command, str) or not command.strip():
            raise bad("command must be a non-empty string")
        workspace = data.get("workspace")
        if workspace is not None and not isinstance(workspace, str):
            raise bad("workspace must be a string")
        timeout_ms = data.get("timeout_ms")
        if timeout_ms is not None and (
            not isinstance(timeout_ms, int) or isinstance(timeout_ms, bool) or timeout_ms <= 0
        ):
            raise bad("timeout_ms must be a positive integer")
        env = data.get("env") or {}
        if not isinstance(env, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in env.items()):
            raise bad("env must map strings to strings")
        return cls(request_id=request_id, workspace=workspace, command=command, timeout_ms=timeout_ms, env=env)


@dataclass
class AgentResponse:
    """One response line."""

    request_id: Optional[str]
    outcome: str
    exit_code: Optional[int] = None
    stdout_b64: str = ""
    stderr_b64: str = ""
    error_code: Optional[str] = None
    error_message: Optional[str] = None
    timings: Dict[str, float] = field(default_factory=dict)
    rolled_back: bool = False
    repeat_violations: int = 0
    txn_id: Optional[str] = None
    matched_rule_ids: List[str] = field(default_factory=list)

    @classmethod
    def from_record(cls, request_id: str, record: TransactionRecord) -> "AgentResponse":
        execution = record.execution
        return cls(
            request_id=request_id,
            outcome=record.outcome.value,
            exit_code=execution.exit_code if execution else None,
            stdout_b64=base64.b64encode(execution.stdout).decode("ascii") if execution else "",
            stderr_b64=base64.b64encode(execution.stderr).decode("ascii") if execution else "",
            error_code=record.error.code if record.error else None,
            error_message=record.error.message if record.error else None,
            timings=record.timings.to_dict(),
            rolled_back=record.outcome is Outcome.ROLLED_BACK,
            txn_id=record.txn_id,
            matched_rule_ids=list(record.decision.matched_rule_ids) if record.decision else [],
        )

    @classmethod
    def from_error(cls, request_id: Optional[str], error: SandboxError, outcome: str = "REJECTED") -> "AgentResponse":
        return cls(request_id=request_id, outcome=outcome, error_code=error.code, error_message=str(error))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "request_id": self.request_id,
            "outcome": self.outcome,
            "exit_code": self.exit_code,
            "stdout_b64": self.stdout_b64,
            "stderr_b64": self.stderr_b64,
            "error_code": self.error_code,
            "error_message": self.error_message,
            "timings": self.timings,
            "rolled_back": self.rolled_back,
            "repeat_violations": self.repeat_violations,
            "txn_id": self.txn_id,
            "matched_rule_ids": self.matched_rule_ids,
        }


class _Responder:
    """Serializes response lines on one connection and counts pending requests."""

    def __init__(self, writer: BinaryIO):
        self.writer = writer
        self._cond = threading.Condition()
        self._pending = 0
        self.broken: Optional[BaseException] = None

    def begin(self) -> None:
        with self._cond:
            self._pending += 1

    def send(self, payload: Dict[str, Any], completes: bool = False) -> None:
        line = (json.dumps(payload, ensure_ascii=False) + "\n").encode("utf-8")
        with self._cond:
            try:
                if self.broken is None:
                    self.writer.write(line)
                    self.writer.flush()
            except (OSError, ValueError) as e:
                self.broken = e
                logger.error("response stream failed: %s", e)
            finally:
                if completes:
                    self._pending -= 1
                    self._cond.notify_all()

    def wait_idle(self) -> None:
        with self._cond:
            while self._pending:
                self._cond.wait()


@dataclass
class _Job:
    request: AgentRequest
    responder: _Responder


class _WorkspaceWorker(threading.Thread):
    """Runs queued requests for one workspace in FIFO order."""

    def __init__(self, service: "AgentService", handle: WorkspaceHandle, depth: int):
        super().__init__(daemon=True, name=f"ws-{handle.root.name}")
        self.service = service
        self.handle = handle
        self.jobs: "queue.Queue[Optional[_Job]]" = queue.Queue(maxsize=depth)
        self._last_blocked: Optional[str] = None
        self._repeat = 0

    def submit(self, job: _Job) -> bool:
        try:
            self.jobs.put_nowait(job)
            return True
        except queue.Full:
            return False

    def stop(self) -> None:
        self.jobs.put(None)

    def run(self) -> None:
        while True:
            job = self.jobs.get()
            if job is None:
                return
            try:
                response = self._handle(job.request)
            except Exception as e:  # every request gets an answer
                logger.exception("request %s failed", job.request.request_id)
                response = AgentResponse(
                    request_id=job.request.request_id,
                    outcome="ERROR",
                    error_code="INTERNAL_ERROR",
                    error_message=f"INTERNAL_ERROR: {e}",
                )
            job.responder.send(response.to_dict(), completes=True)

    def _handle(self, request: AgentRequest) -> AgentResponse:
        assert request.request_id is not None
        opts = ExecOptions(timeout_ms=request.timeout_ms, env=request.env)
        try:
            record = self.service.manager.run_transaction(self.handle, request.command, exec_opts=opts)
        except SandboxError as e:
            self._note(None)
            return AgentResponse.from_error(request.request_id, e)

        response = AgentResponse.from_record(request.request_id, record)
        if record.error is not None and record.error.code == "POLICY_VIOLATION":
            response.repeat_violations = self._note(record.command_raw)
            if response.repeat_violations >= 2 and response.error_message:
                response.error_message = f"{response.error_message} (repeat={response.repeat_violations})"
        else:
            self._note(None)
        return response

    def _note(self, blocked_command: Optional[str]) -> int:
        """Track consecutive identical blocked commands."""
        if blocked_command is None:
            self._last_blocked, self._repeat = None, 0
        elif blocked_command == self._last_blocked:
            self._repeat += 1
        else:
            self._last_blocked, self._repeat = blocked_command, 1
        return self._repeat


class AgentService:
    """Dispatches agent requests to per-workspace transaction queues."""

    def __init__(
        self,
        config: ServiceConfig,
        manager: Optional[TransactionManager] = None,
        policy: Optional[PolicySet] = None,
    ):
        """
        Initialize the service.

        Args:
            config: Workspace registry and defaults.
            manager: Transaction manager; built from the config when omitted.
            policy: Rule set; loaded from ``config.policy`` when omitted.
        """
        self.config = config
        if policy is None:
            policy = load_policy_file(config.policy) if config.policy else default_policy()
        self.manager = manager or TransactionManager(
            policy=policy,
            default_timeout_ms=config.timeout_ms,
            default_output_cap=config.output_cap,
        )
        self._workers: Dict[Path, _WorkspaceWorker] = {}
        self._workers_lock = threading.Lock()
        self._stopping = threading.Event()

    def register_workspace(self, alias: str, root: PathLike, store_dir: Optional[PathLike] = None) -> None:
        """
        Register a workspace alias and persist it in the service config.

        Raises:
            ServiceError: ALIAS_TAKEN or INVALID_ROOT.
        """
        if alias in self.config.workspaces:
            raise ServiceError("ALIAS_TAKEN", f"workspace alias {alias!r} is already registered", {"alias": alias})
        root_path = Path(root).expanduser().resolve()
        if not root_path.is_dir():
            raise ServiceError(
                "INVALID_ROOT", f"workspace root {root_path} is not a directory", {"root": str(root_path)}
            )
        store_path = Path(store_dir).expanduser().resolve() if store_dir else None
        if store_path is not None and is_within(store_path, root_path):
            raise ServiceError("INVALID_ROOT", f"store {store_path} lies inside {root_path}", {"root": str(root_path)})
        self.config.workspaces[alias] = WorkspaceEntry(str(root_path), str(store_path) if store_path else None)
        self.config.save()
        logger.info("registered workspace %s -> %s", alias, root_path)

    def resolve_workspace(self, name: Optional[str]) -> WorkspaceHandle:
        """
        Resolve an alias or directory path to an open workspace.

        Raises:
            ServiceError: UNKNOWN_WORKSPACE.
        """
        return self._worker_for(name).handle

    def describe(self) -> Dict[str, Any]:
        """Guidance text and registry summary for agent prompts."""
        return {
            "guidance": GUIDANCE,
            "policy_version": self.manager.policy.version,
            "workspaces": sorted(self.config.workspaces),
        }

    def recover_all(self) -> Dict[str, List[str]]:
        """Run the startup recovery scan on every registered workspace."""
        found: Dict[str, List[str]] = {}
        for alias in self.config.workspaces:
            try:
                handle = self.resolve_workspace(alias)
                orphans = self.manager.recover(handle)
            except SandboxError as e:
                logger.error("recovery scan of %s failed: %s", alias, e)
                continue
            if orphans:
                found[alias] = [p.name for p in orphans]
        return found

    def serve_stream(self, reader: BinaryIO, writer: BinaryIO) -> int:
        """
        Serve one request stream until EOF or a shutdown request.

        Args:
            reader: Binary request stream.
            writer: Binary response stream.

        Returns:
            Number of responses written.

        Raises:
            ServiceError: TRANSPORT_FAILED when the response stream breaks.
        """
        responder = _Responder(writer)
        seen_ids: set = set()
        answered = 0
        shutdown: Optional[AgentRequest] = None

        for line in iter(reader.readline, b""):
            if self._stopping.is_set():
                break
            if not line.strip():
                continue
            answered += 1
            try:
                request = AgentRequest.from_line(line)
            except ServiceError as e:
                responder.send(AgentResponse.from_error(e.detail.get("request_id"), e).to_dict())
                continue

            if request.op == "describe":
                responder.send({"request_id": request.request_id, "op": "describe", **self.describe()})
                continue
            if request.op == "shutdown":
                shutdown = request
                break

            if request.request_id in seen_ids:
                error = ServiceError("BAD_REQUEST", f"request_id {request.request_id!r} was already used")
                responder.send(AgentResponse.from_error(request.request_id, error).to_dict())
                continue
            seen_ids.add(request.request_id)

            try:
                worker = self._worker_for(request.workspace)
            except ServiceError as e:
                responder.send(AgentResponse.from_error(request.request_id, e).to_dict())
                continue

            responder.begin()
            if not worker.submit(_Job(request, responder)):
                error = ServiceError(
                    "WORKSPACE_BUSY",
                    f"queue for {worker.handle.root} is full ({self.config.queue_depth} pending)",
                    {"queue_depth": self.config.queue_depth},
                )
                responder.send(AgentResponse.from_error(request.request_id, error).to_dict(), completes=True)

        responder.wait_idle()
        if shutdown is not None:
            self._stopping.set()
            responder.send({"request_id": shutdown.request_id, "op": "shutdown", "ok": True})
        if responder.broken is not None:
            raise ServiceError("TRANSPORT_FAILED", f"response stream failed: {responder.broken}")
        return answered

    @property
    def stopping(self) -> bool:
        return self._stopping.is_set()

    def request_stop(self) -> None:
        self._stopping.set()

    def close(self) -> None:
        """Stop workspace workers after their queues drain."""
        with self._workers_lock:
            workers = list(self._workers.values())
            self._workers.clear()
        for worker in workers:
            worker.stop()
        for worker in workers:
            worker.join()

    def _worker_for(self, name: Optional[str]) -> _WorkspaceWorker:
        if name is None:
            if len(self.config.workspaces) != 1:
                raise ServiceError(
                    "UNKNOWN_WORKSPACE", "request names no workspace and none is the single registered one"
                )
            name = next(iter(self.config.workspaces))

        entry = self.config.workspaces.get(name)
        if entry is not None:
            root, store = Path(entry.root), entry.store
        elif os.path.isabs(name) and Path(name).is_dir():
            root, store = Path(name), None
        else:
            raise ServiceError("UNKNOWN_WORKSPACE", f"workspace {name!r} is not registered", {"workspace": name})

        key = root.expanduser().resolve()
        with self._workers_lock:
            worker = self._workers.get(key)
            if worker is None:
                try:
                    handle = self.manager.open_workspace(key, store)
                except SandboxError as e:
                    raise ServiceError(
                        "UNKNOWN_WORKSPACE", f"workspace {name!r} cannot be opened: {e}", {"workspace": name}
                    )
                worker = _WorkspaceWorker(self, handle, self.config.queue_depth)
                worker.start()
                self._workers[key] = worker
            return worker


def _require_headless(stream: Any) -> None:
    if stream is None:
        raise ServiceError("TRANSPORT_FAILED", "no request stream is attached to standard input")
    isatty = getattr(stream, "isatty", None)
    if isatty is not None and isatty():
        raise ServiceError(
            "INTERACTIVE_INPUT", "refusing to read requests from a terminal; pipe a request stream instead"
        )


def serve(transport: str, config: ServiceConfig, service: Optional[AgentService] = None) -> int:
    """
    Run the service until EOF, a shutdown request or SIGTERM/SIGINT.

    Args:
        transport: ``"stdio"`` or the path of a Unix socket to listen on.
        config: Service configuration.
        service: Prebuilt service (tests).

    Returns:
        Number of responses written.

    Raises:
        ServiceError: INVALID_CONFIG, INTERACTIVE_INPUT or TRANSPORT_FAILED.
    """
    if not config.workspaces:
        raise ServiceError("INVALID_CONFIG", "no workspace is registered")
    service = service or AgentService(config)
    quarantined = service.recover_all()
    for alias, orphans in quarantined.items():
        logger.warning("workspace %s quarantined at startup (orphans: %s)", alias, ", ".join(orphans))

    def on_signal(signum: int, _frame: Any) -> None:
        logger.info("signal %d received; shutting down", signum)
        service.request_stop()
        raise KeyboardInterrupt

    previous = {}
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGTERM, signal.SIGINT):
            previous[sig] = signal.signal(sig, on_signal)

    try:
        if transport == "stdio":
            _require_headless(sys.stdin)
            return service.serve_stream(sys.stdin.buffer, sys.stdout.buffer)
        return _serve_socket(service, Path(transport))
    except KeyboardInterrupt:
        return 0
    finally:
        service.close()
        for sig, handler in previous.items():
            signal.signal(sig, handler)


def _serve_socket(service: AgentService, path: Path) -> int:
    if path.exists():
        path.unlink()
    listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    listener.bind(str(path))
    os.chmod(path, 0o600)
    listener.listen()
    listener.settimeout(0.5)
    logger.info("listening on %s", path)

    total = 0
    total_lock = threading.Lock()
    connections: List[threading.Thread] = []
    open_conns: List[socket.socket] = []

    def handle(conn: socket.socket) -> None:
        nonlocal total
        with conn, conn.makefile("rb") as reader, conn.makefile("wb") as writer:
            try:
                count = service.serve_stream(reader, writer)
            except ServiceError as e:
                logger.warning("connection dropped: %s", e)
                return
        with total_lock:
            total += count

    try:
        while not service.stopping:
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            open_conns.append(conn)
            thread = threading.Thread(target=handle, args=(conn,), daemon=True)
            thread.start()
            connections.append(thread)
    finally:
        listener.close()
        try:
            path.unlink()
        except FileNotFoundError:
            pass
        # unblock connections still waiting for their next request line
        for conn in open_conns:
            try:
                conn.shutdown(socket.SHUT_RD)
            except OSError:
                pass
    for thread in connections:
        thread.join()
    return total
