"""
Transaction Manager Module.

Runs agent commands as atomic transactions against a workspace:

1. classify the command against the policy;
2. UNSAFE commands are blocked without spawning anything;
3. SAFE commands run directly, without a snapshot;
4. UNCERTAIN commands run between a snapshot and either a discard (success)
   or a verified restore (failure).

A restore that cannot be verified ends the transaction as FATAL and
quarantines the workspace until an operator resets it. Every transaction is
appended to the workspace journal before ``run_transaction`` returns.
"""
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import psutil

from modules.command_executor import CommandExecutor, ExecutionRequest, ExecutionResult
from modules.journal import Journal, journal_path_for, open_journal
from modules.policy_engine import (
    CommandLine,
    PolicyClass,
    PolicyDecision,
    PolicySet,
    classify,
    default_policy,
    parse_command,
)
from modules.snapshot_store import Snapshot, SnapshotStore, WorkspaceDigest, list_snapshot_dirs
from utils.constants import (
    DEFAULT_JOURNAL_MAX_BYTES,
    DEFAULT_OUTPUT_CAP,
    DEFAULT_TIMEOUT_MS,
    LOCK_FILE,
    QUARANTINE_FILE,
)
from utils.errors import ExecutionError, SandboxError, SnapshotError, TransactionError
from utils.helpers import default_store_dir, is_within, iso_timestamp, new_token, utc_now, write_text_atomic
from utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


class Outcome(Enum):
    """Terminal state of a transaction."""

    EXECUTED_SAFE = "EXECUTED_SAFE"
    BLOCKED = "BLOCKED"
    COMMITTED = "COMMITTED"
    ROLLED_BACK = "ROLLED_BACK"
    FATAL = "FATAL"


@dataclass(frozen=True)
class PhaseTimings:
    """Per-phase durations in milliseconds."""

    classify_ms: float = 0.0
    snapshot_ms: float = 0.0
    execute_ms: float = 0.0
    finalize_ms: float = 0.0
    total_ms: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {
            "classify_ms": round(self.classify_ms, 3),
            "snapshot_ms": round(self.snapshot_ms, 3),
            "execute_ms": round(self.execute_ms, 3),
            "finalize_ms": round(self.finalize_ms, 3),
            "total_ms": round(self.total_ms, 3),
        }


@dataclass(frozen=True)
class ErrorInfo:
    """Structured error attached to a transaction record."""

    code: str
    message: str
    detail: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def build(cls, code: str, text: str, detail: Optional[Dict[str, Any]] = None) -> "ErrorInfo":
        """Create an ErrorInfo whose message starts with ``"<code>: "``."""
        return cls(code, f"{code}: {text}", dict(detail or {}))

    @classmethod
    def from_error(cls, error: SandboxError) -> "ErrorInfo":
        return cls.build(error.code, error.message, error.detail)

    def to_dict(self) -> Dict[str, Any]:
        return {"code": self.code, "message": self.message, "detail": self.detail}


@dataclass(frozen=True)
class TransactionRecord:
    """Full lifecycle of one command."""

    txn_id: str
    command_raw: str
    workspace_root: str
    decision: Optional[PolicyDecision]
    outcome: Outcome
    pre_digest: Optional[WorkspaceDigest]
    post_digest: Optional[WorkspaceDigest]
    execution: Optional[ExecutionResult]
    timings: PhaseTimings
    error: Optional[ErrorInfo]
    started_at: datetime
    finished_at: datetime

    def to_dict(self) -> Dict[str, Any]:
        """Serialize for the journal (output bytes are summarized, not stored)."""
        return {
            "kind": "TRANSACTION",
            "txn_id": self.txn_id,
            "command_raw": self.command_raw,
            "workspace_root": self.workspace_root,
            "decision": self.decision.to_dict() if self.decision else None,
            "outcome": self.outcome.value,
            "pre_digest": self.pre_digest.to_dict() if self.pre_digest else None,
            "post_digest": self.post_digest.to_dict() if self.post_digest else None,
            "execution": self.execution.to_dict() if self.execution else None,
            "timings": self.timings.to_dict(),
            "error": self.error.to_dict() if self.error else None,
            "started_at": iso_timestamp(self.started_at),
            "finished_at": iso_timestamp(self.finished_at),
        }


@dataclass
class ExecOptions:
    """Per-call overrides for the executor."""

    timeout_ms: Optional[int] = None
    output_cap: Optional[int] = None
    env: Dict[str, str] = field(default_factory=dict)


class WorkspaceLock:
    """
    Exclusive lock file holding ``"<pid> <token>"`` of its owner.

    A lock whose owner pid is no longer alive is treated as stale and taken
    over.
    """

    def __init__(self, path: Path):
        self.path = path
        self.token: Optional[str] = None

    @property
    def held(self) -> bool:
        return self.token is not None

    def owner_pid(self) -> Optional[int]:
        """Pid recorded in the lock file, if any."""
        try:
            content = self.path.read_text(encoding="utf-8").split()
        except OSError:
            return None
        if not content or not content[0].isdigit():
            return None
        return int(content[0])

    def acquire(self) -> None:
        """
        Take the lock.

        Raises:
            TransactionError: WORKSPACE_BUSY when a live owner holds it.
        """
        if self.held:
            raise TransactionError(
                "WORKSPACE_BUSY", f"lock {self.path} is already held by this handle", {"lock": str(self.path)}
            )
        token = new_token()
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
            except FileExistsError:
                owner = self.owner_pid()
                if owner is None and self._recently_created():
                    # owner has created the file but not yet written its pid
                    raise TransactionError(
                        "WORKSPACE_BUSY", f"lock {self.path} is being taken", {"lock": str(self.path)}
                    )
                if owner is not None and psutil.pid_exists(owner):
                    raise TransactionError(
                        "WORKSPACE_BUSY",
                        f"workspace is locked by pid {owner}",
                        {"lock": str(self.path), "owner_pid": owner},
                    )
                logger.warning("removing stale lock %s (owner pid %s is gone)", self.path, owner)
                try:
                    self.path.unlink()
                except FileNotFoundError:
                    pass
                continue
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                f.write(f"{os.getpid()} {token}\n")
            self.token = token
            return
        raise TransactionError("WORKSPACE_BUSY", f"could not take lock {self.path}", {"lock": str(self.path)})

    def _recently_created(self, window_seconds: float = 2.0) -> bool:
        try:
            return time.time() - self.path.stat().st_mtime < window_seconds
        except OSError:
            return False

    def release(self) -> None:
        """Release the lock if this instance holds it."""
        if not self.held:
            return
        try:
            content = self.path.read_text(encoding="utf-8").split()
            if len(content) == 2 and content[1] == self.token:
                self.path.unlink()
        except OSError as e:
            logger.warning("could not release lock %s: %s", self.path, e)
        finally:
            self.token = None


@dataclass
class WorkspaceHandle:
    """An opened workspace: root, store, lock and quarantine state."""

    root: Path
    store_dir: Path
    quarantined: bool = False
    lock: WorkspaceLock = field(init=False)

    def __post_init__(self) -> None:
        self.lock = WorkspaceLock(self.store_dir / LOCK_FILE)

    @property
    def quarantine_path(self) -> Path:
        return self.store_dir / QUARANTINE_FILE

    @property
    def journal_path(self) -> Path:
        return journal_path_for(self.store_dir)

    def refresh(self) -> bool:
        """Re-read the persisted quarantine marker."""
        self.quarantined = self.quarantine_path.exists()
        return self.quarantined

    def quarantine_reason(self) -> Optional[Dict[str, Any]]:
        """Contents of the quarantine marker, or None."""
        try:
            return json.loads(self.quarantine_path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return None


@dataclass
class TransactionContext:
    """State of a ``transaction()`` block."""

    txn_id: str
    workspace: WorkspaceHandle
    snapshot: Snapshot
    record: Optional[TransactionRecord] = None


def _ms_since(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


class TransactionManager:
    """Executes commands transactionally against workspaces."""

    def __init__(
        self,
        policy: Optional[PolicySet] = None,
        executor: Optional[CommandExecutor] = None,
        store: Optional[SnapshotStore] = None,
        verify_digests: bool = True,
        default_timeout_ms: int = DEFAULT_TIMEOUT_MS,
        default_output_cap: int = DEFAULT_OUTPUT_CAP,
        journal_max_bytes: int = DEFAULT_JOURNAL_MAX_BYTES,
    ):
        """
        Initialize the manager.

        Args:
            policy: Rule set used when a call does not pass one.
            executor: Command executor (replaceable in tests).
            store: Snapshot store.
            verify_digests: Compute digests for SAFE, BLOCKED and COMMITTED outcomes.
            default_timeout_ms: Executor timeout when a call sets none.
            default_output_cap: Per-stream capture limit when a call sets none.
            journal_max_bytes: Size at which the journal is cut over.
        """
        self.policy = policy or default_policy()
        self.executor = executor or CommandExecutor()
        self.store = store or SnapshotStore()
        self.verify_digests = verify_digests
        self.default_timeout_ms = default_timeout_ms
        self.default_output_cap = default_output_cap
        self.journal_max_bytes = journal_max_bytes

    # ------------------------------------------------------------------
    # Workspaces
    # ------------------------------------------------------------------

    def open_workspace(self, root: PathLike, store_dir: Optional[PathLike] = None) -> WorkspaceHandle:
        """
        Open a workspace, creating its store directory if needed.

        Args:
            root: Existing workspace directory.
            store_dir: Snapshot and journal directory outside ``root``.

        Returns:
            A WorkspaceHandle with its quarantine state loaded.

        Raises:
            TransactionError: ROOT_NOT_FOUND, STORE_INSIDE_ROOT or IO_ERROR.
        """
        root_path = Path(root).expanduser().resolve()
        if not root_path.is_dir():
            raise TransactionError(
                "ROOT_NOT_FOUND", f"workspace root {root_path} does not exist", {"root": str(root_path)}
            )
        store_path = Path(store_dir).expanduser().resolve() if store_dir else default_store_dir(root_path)
        if is_within(store_path, root_path):
            raise TransactionError(
                "STORE_INSIDE_ROOT",
                f"store {store_path} lies inside workspace {root_path}",
                {"root": str(root_path), "store_dir": str(store_path)},
            )
        try:
            store_path.mkdir(parents=True, exist_ok=True, mode=0o700)
        except OSError as e:
            raise TransactionError(
                "IO_ERROR", f"cannot create store {store_path}: {e.strerror or e}", {"store_dir": str(store_path)}
            )

        ws = WorkspaceHandle(root=root_path, store_dir=store_path)
        if ws.refresh():
            logger.warning("workspace %s is quarantined", root_path)
        return ws

    def journal_for(self, ws: WorkspaceHandle) -> Journal:
        """Writer for the workspace journal."""
        return open_journal(ws.journal_path, self.journal_max_bytes)

    # ------------------------------------------------------------------
    # Transactions
    # ------------------------------------------------------------------

    def run_transaction(
        self,
        ws: WorkspaceHandle,
        raw: str,
        policy: Optional[PolicySet] = None,
        exec_opts: Optional[ExecOptions] = None,
    ) -> TransactionRecord:
        """
        Run one command as a transaction.

        Args:
            ws: Opened workspace.
            raw: Command text as emitted by the agent.
            policy: Rule set; defaults to the manager's.
            exec_opts: Timeout, output cap and environment overrides.

        Returns:
            The journaled TransactionRecord.

        Raises:
            TransactionError: WORKSPACE_QUARANTINED or WORKSPACE_BUSY.
            PolicyError: EMPTY_COMMAND or UNBALANCED_QUOTE.
            JournalError: when the record cannot be persisted.
        """
        self._ensure_not_quarantined(ws)
        cmd = parse_command(raw)

        ws.lock.acquire()
        # timestamps start under the lock so journaled intervals never overlap
        started_at = utc_now()
        t_start = time.perf_counter()
        try:
            # the marker may have appeared while waiting on another process
            self._ensure_not_quarantined(ws)
            record = self._run_locked(
                ws, cmd.raw, cmd, policy or self.policy, exec_opts or ExecOptions(), started_at, t_start
            )
            self.journal_for(ws).append(record.to_dict())
        finally:
            ws.lock.release()

        logger.info(
            "txn %s %s in %.1f ms: %s",
            record.txn_id,
            record.outcome.value,
            record.timings.total_ms,
            record.command_raw,
        )
        return record

    def _run_locked(
        self,
        ws: WorkspaceHandle,
        raw: str,
        cmd: CommandLine,
        policy: PolicySet,
        opts: ExecOptions,
        started_at: datetime,
        t_start: float,
    ) -> TransactionRecord:
        txn_id = new_token("txn-")
        t_classify = time.perf_counter()
        decision = classify(cmd, policy, workspace_root=ws.root)
        classify_ms = _ms_since(t_classify)
        logger.info("txn %s classified %s", txn_id, decision.policy_class.value)

        def finish(
            outcome: Outcome,
            pre: Optional[WorkspaceDigest] = None,
            post: Optional[WorkspaceDigest] = None,
            execution: Optional[ExecutionResult] = None,
            error: Optional[ErrorInfo] = None,
            snapshot_ms: float = 0.0,
            execute_ms: float = 0.0,
            finalize_ms: float = 0.0,
        ) -> TransactionRecord:
            timings = PhaseTimings(classify_ms, snapshot_ms, execute_ms, finalize_ms, _ms_since(t_start))
            return TransactionRecord(
                txn_id=txn_id,
                command_raw=raw,
                workspace_root=str(ws.root),
                decision=decision,
                outcome=outcome,
                pre_digest=pre,
                post_digest=post,
                execution=execution,
                timings=timings,
                error=error,
                started_at=started_at,
                finished_at=utc_now(),
            )

        if decision.policy_class is PolicyClass.UNSAFE:
            pre, digest_error = self._observe(ws)
            rule_ids = decision.blacklist_rule_ids
            detail: Dict[str, Any] = {"rule_ids": rule_ids, "decision": decision.to_dict()}
            if digest_error:
                detail["digest_error"] = digest_error.to_dict()
            error = ErrorInfo.build(
                "POLICY_VIOLATION",
                f"blocked by rule {', '.join(rule_ids)}; revise the plan instead of retrying",
                detail,
            )
            return finish(Outcome.BLOCKED, pre=pre, post=pre, error=error)

        request = self._request(ws, raw, opts)

        if decision.policy_class is PolicyClass.SAFE:
            pre, pre_error = self._observe(ws)
            t_exec = time.perf_counter()
            try:
                result: Optional[ExecutionResult] = self.executor.execute(request)
                exec_info = None
            except ExecutionError as e:
                result, exec_info = None, ErrorInfo.from_error(e)
            execute_ms = _ms_since(t_exec)
            post, post_error = self._observe(ws)
            error = exec_info or pre_error or post_error
            return finish(
                Outcome.EXECUTED_SAFE, pre=pre, post=post, execution=result, error=error, execute_ms=execute_ms
            )

        # UNCERTAIN: prepare
        t_snap = time.perf_counter()
        try:
            snap = self.store.take_snapshot(ws.root, ws.store_dir)
        except SnapshotError as e:
            logger.warning("txn %s not started: snapshot failed: %s", txn_id, e)
            # snapshot_ms stays 0 when no snapshot was taken
            info = ErrorInfo.from_error(e)
            info.detail["snapshot_attempt_ms"] = round(_ms_since(t_snap), 3)
            return finish(Outcome.BLOCKED, error=info)
        snapshot_ms = _ms_since(t_snap)
        pre = snap.pre_digest

        t_exec = time.perf_counter()
        exec_error: Optional[ExecutionError] = None
        result = None
        try:
            result = self.executor.execute(request)
        except ExecutionError as e:
            exec_error = e
        execute_ms = _ms_since(t_exec)

        t_final = time.perf_counter()
        if result is not None and result.succeeded():
            discard_error = self._discard(snap)
            post, digest_error = self._observe(ws)
            error = discard_error or digest_error
            return finish(
                Outcome.COMMITTED,
                pre=pre,
                post=post,
                execution=result,
                error=error,
                snapshot_ms=snapshot_ms,
                execute_ms=execute_ms,
                finalize_ms=_ms_since(t_final),
            )

        # rollback
        try:
            report = self.store.restore_snapshot(snap)
        except SnapshotError as e:
            self._quarantine(ws, f"restore failed for {txn_id}: {e}", txn_id=txn_id, snapshot_id=snap.id)
            post = self._try_digest(ws)
            error = ErrorInfo.build(
                "FATAL_RESTORE_FAILURE",
                f"workspace could not be restored ({e.code}); it is quarantined until an operator resets it",
                {"snapshot_id": snap.id, "snapshot_path": str(snap.storage_path), "cause": e.to_dict()},
            )
            return finish(
                Outcome.FATAL,
                pre=pre,
                post=post,
                execution=result,
                error=error,
                snapshot_ms=snapshot_ms,
                execute_ms=execute_ms,
                finalize_ms=_ms_since(t_final),
            )

        discard_error = self._discard(snap)
        if exec_error is not None:
            cause = f"{exec_error.code}: {exec_error.message}"
            detail = {"cause": exec_error.to_dict()}
        else:
            assert result is not None
            cause = f"command {result.describe()}"
            detail = {
                "exit_code": result.exit_code,
                "signal": result.terminated_by_signal,
                "timed_out": result.timed_out,
            }
        detail["restore"] = report.to_dict()
        if discard_error:
            detail["discard_error"] = discard_error.to_dict()
        error = ErrorInfo.build("STATE_ROLLED_BACK", f"{cause}; workspace restored to its previous state", detail)
        return finish(
            Outcome.ROLLED_BACK,
            pre=pre,
            post=report.restored_digest,
            execution=result,
            error=error,
            snapshot_ms=snapshot_ms,
            execute_ms=execute_ms,
            finalize_ms=_ms_since(t_final),
        )

    @contextmanager
    def transaction(self, ws: WorkspaceHandle, label: str = "python-block") -> Iterator[TransactionContext]:
        """
        Wrap arbitrary Python actions on a workspace in a transaction.

        A snapshot is taken on entry. Normal exit commits (discards the
        snapshot); an exception restores the workspace and is re-raised.

        Example:
            with manager.transaction(ws) as txn:
                (ws.root / "config.yaml").write_text("...")

        Raises:
            TransactionError: WORKSPACE_QUARANTINED or WORKSPACE_BUSY.
            SnapshotError: when the snapshot cannot be taken.
        """
        self._ensure_not_quarantined(ws)
        ws.lock.acquire()
        started_at = utc_now()
        t_start = time.perf_counter()
        try:
            t_snap = time.perf_counter()
            snap = self.store.take_snapshot(ws.root, ws.store_dir)
            snapshot_ms = _ms_since(t_snap)
            ctx = TransactionContext(txn_id=new_token("txn-"), workspace=ws, snapshot=snap)

            t_exec = time.perf_counter()
            try:
                yield ctx
            except BaseException as exc:
                execute_ms = _ms_since(t_exec)
                t_final = time.perf_counter()
                try:
                    report = self.store.restore_snapshot(snap)
                except SnapshotError as e:
                    self._quarantine(
                        ws, f"restore failed for {ctx.txn_id}: {e}", txn_id=ctx.txn_id, snapshot_id=snap.id
                    )
                    ctx.record = self._block_record(
                        ctx, label, Outcome.FATAL, self._try_digest(ws),
                        ErrorInfo.build(
                            "FATAL_RESTORE_FAILURE",
                            f"workspace could not be restored ({e.code})",
                            {"snapshot_id": snap.id},
                        ),
                        PhaseTimings(0.0, snapshot_ms, execute_ms, _ms_since(t_final), _ms_since(t_start)),
                        started_at,
                    )
                    self.journal_for(ws).append(ctx.record.to_dict())
                    raise
                self._discard(snap)
                ctx.record = self._block_record(
                    ctx, label, Outcome.ROLLED_BACK, report.restored_digest,
                    ErrorInfo.build("STATE_ROLLED_BACK", f"{type(exc).__name__}: {exc}", {"restore": report.to_dict()}),
                    PhaseTimings(0.0, snapshot_ms, execute_ms, _ms_since(t_final), _ms_since(t_start)),
                    started_at,
                )
                self.journal_for(ws).append(ctx.record.to_dict())
                raise

            execute_ms = _ms_since(t_exec)
            t_final = time.perf_counter()
            discard_error = self._discard(snap)
            post, digest_error = self._observe(ws)
            ctx.record = self._block_record(
                ctx, label, Outcome.COMMITTED, post, discard_error or digest_error,
                PhaseTimings(0.0, snapshot_ms, execute_ms, _ms_since(t_final), _ms_since(t_start)),
                started_at,
            )
            self.journal_for(ws).append(ctx.record.to_dict())
        finally:
            ws.lock.release()

    def _block_record(
        self,
        ctx: TransactionContext,
        label: str,
        outcome: Outcome,
        post: Optional[WorkspaceDigest],
        error: Optional[ErrorInfo],
        timings: PhaseTimings,
        started_at: datetime,
    ) -> TransactionRecord:
        return TransactionRecord(
            txn_id=ctx.txn_id,
            command_raw=label,
            workspace_root=str(ctx.workspace.root),
            decision=None,
            outcome=outcome,
            pre_digest=ctx.snapshot.pre_digest,
            post_digest=post,
            execution=None,
            timings=timings,
            error=error,
            started_at=started_at,
            finished_at=utc_now(),
        )

    # ------------------------------------------------------------------
    # Quarantine and recovery
    # ------------------------------------------------------------------

    def reset_quarantine(self, ws: WorkspaceHandle, operator_ack: str) -> None:
        """
        Clear a quarantine after operator review.

        Leftover snapshot directories are removed and a QUARANTINE_RESET
        record holding the acknowledgment is journaled.

        Raises:
            TransactionError: NOT_QUARANTINED, WORKSPACE_BUSY or INVALID_REQUEST.
        """
        if not ws.refresh():
            raise TransactionError("NOT_QUARANTINED", f"workspace {ws.root} is not quarantined", {"root": str(ws.root)})
        if not operator_ack or not operator_ack.strip():
            raise TransactionError("INVALID_REQUEST", "an operator acknowledgment is required")

        ws.lock.acquire()
        try:
            reason = ws.quarantine_reason()
            purged: List[str] = []
            for path in list_snapshot_dirs(ws.store_dir):
                self.store.purge_snapshot_dir(path)
                purged.append(path.name)
            self.journal_for(ws).append(
                {
                    "kind": "QUARANTINE_RESET",
                    "workspace_root": str(ws.root),
                    "operator_ack": operator_ack,
                    "quarantine": reason,
                    "purged_snapshots": purged,
                    "at": iso_timestamp(utc_now()),
                }
            )
            ws.quarantine_path.unlink()
            ws.quarantined = False
        finally:
            ws.lock.release()
        logger.warning("quarantine of %s reset by operator: %s", ws.root, operator_ack)

    def recover(self, ws: WorkspaceHandle) -> List[Path]:
        """
        Startup scan for snapshots left behind by an interrupted transaction.

        Any leftover snapshot means the workspace may be in a half-applied
        state, so the workspace is quarantined and a RECOVERY_QUARANTINE record
        is journaled. The record describes each orphan from its manifest
        (creation time and pre-command digest) so the operator can pick a
        restore point; orphans without a readable manifest are listed with
        ``manifest: null``.

        Returns:
            The orphaned snapshot directories found.
        """
        ws.lock.acquire()
        try:
            orphans = list_snapshot_dirs(ws.store_dir)
            if orphans and not ws.refresh():
                names = [p.name for p in orphans]
                self._quarantine(ws, f"orphaned snapshots found at startup: {', '.join(names)}", snapshot_id=names[-1])
                self.journal_for(ws).append(
                    {
                        "kind": "RECOVERY_QUARANTINE",
                        "workspace_root": str(ws.root),
                        "orphaned_snapshots": names,
                        "orphans": [self._describe_orphan(p) for p in orphans],
                        "at": iso_timestamp(utc_now()),
                    }
                )
            return orphans
        finally:
            ws.lock.release()

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    def _describe_orphan(self, path: Path) -> Dict[str, Any]:
        try:
            snap = self.store.load_snapshot(path)
        except SnapshotError as e:
            logger.warning("orphaned snapshot %s has no readable manifest: %s", path.name, e)
            return {"snapshot_id": path.name, "manifest": None}
        return {
            "snapshot_id": snap.id,
            "manifest": {
                "created_at": iso_timestamp(snap.created_at),
                "source_root": str(snap.source_root),
                "entries": len(snap.manifest),
                "pre_digest": snap.pre_digest.to_dict(),
            },
        }

    def _ensure_not_quarantined(self, ws: WorkspaceHandle) -> None:
        if ws.refresh():
            reason = ws.quarantine_reason() or {}
            raise TransactionError(
                "WORKSPACE_QUARANTINED",
                f"workspace {ws.root} is quarantined: {reason.get('reason', 'unknown reason')}",
                {"root": str(ws.root), "quarantine": reason},
            )

    def _quarantine(self, ws: WorkspaceHandle, reason: str, **extra: Any) -> None:
        marker = {"reason": reason, "at": iso_timestamp(utc_now()), **extra}
        write_text_atomic(ws.quarantine_path, json.dumps(marker, sort_keys=True) + "\n")
        ws.quarantined = True
        logger.error("workspace %s quarantined: %s", ws.root, reason)

    def _request(self, ws: WorkspaceHandle, raw: str, opts: ExecOptions) -> ExecutionRequest:
        return ExecutionRequest(
            command=raw,
            cwd=ws.root,
            env=dict(opts.env),
            timeout_ms=opts.timeout_ms or self.default_timeout_ms,
            output_cap=opts.output_cap or self.default_output_cap,
        )

    def _observe(self, ws: WorkspaceHandle) -> Tuple[Optional[WorkspaceDigest], Optional[ErrorInfo]]:
        """
        Digest the workspace for a record.

        A workspace the digest cannot read (a FIFO, a socket, an unreadable
        file) yields ``(None, DIGEST_UNAVAILABLE)`` so the transaction still
        reaches the journal.
        """
        if not self.verify_digests:
            return None, None
        try:
            return self.store.compute_digest(ws.root), None
        except SnapshotError as e:
            logger.warning("workspace %s could not be digested: %s", ws.root, e)
            return None, ErrorInfo.build(
                "DIGEST_UNAVAILABLE",
                f"workspace digest could not be computed ({e.code}: {e.message})",
                {"cause": e.to_dict()},
            )

    def _try_digest(self, ws: WorkspaceHandle) -> Optional[WorkspaceDigest]:
        try:
            return self.store.compute_digest(ws.root)
        except SnapshotError:
            return None

    def _discard(self, snap: Snapshot) -> Optional[ErrorInfo]:
        for attempt in (1, 2):
            try:
                self.store.discard_snapshot(snap)
                return None
            except SnapshotError as e:
                if attempt == 2:
                    logger.error("snapshot %s could not be discarded: %s", snap.id, e)
                    return ErrorInfo.from_error(e)
        return None
