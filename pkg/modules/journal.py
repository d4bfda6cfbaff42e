"""
Journal Module.

Append-only, line-delimited persistence of transaction records.

Every line is one JSON object::

    {"checksum": "<sha256 hex>", "record": {...}, "seq": 42}

The checksum is the SHA-256 of ``"<seq>:" + canonical_json(record)`` where
canonical JSON uses sorted keys and compact separators. Sequence numbers are
gapless within a file. When the file grows past the size limit it is renamed
to ``journal.<n>.log`` and numbering continues in a fresh ``journal.log``.
"""
import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import pandas as pd

from utils.constants import DEFAULT_JOURNAL_MAX_BYTES, JOURNAL_FILE
from utils.errors import JournalError
from utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


def canonical_json(record: Dict[str, Any]) -> str:
    """Serialize a record with sorted keys and compact separators."""
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def record_checksum(seq: int, record: Dict[str, Any]) -> str:
    """Checksum of one journal line payload."""
    payload = f"{seq}:{canonical_json(record)}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class JournalEntry:
    """One verified journal line."""

    seq: int
    record: Dict[str, Any]
    checksum: str

    def to_line(self) -> str:
        return canonical_json({"seq": self.seq, "checksum": self.checksum, "record": self.record}) + "\n"

    @classmethod
    def build(cls, seq: int, record: Dict[str, Any]) -> "JournalEntry":
        return cls(seq=seq, record=record, checksum=record_checksum(seq, record))


@dataclass(frozen=True)
class JournalWarning:
    """A non-fatal read condition, such as a torn final line."""

    code: str
    line_number: int
    offset: int
    message: str

    def __str__(self) -> str:
        return f"{self.code}: line {self.line_number} (byte {self.offset}): {self.message}"


@dataclass
class JournalReadResult:
    """Entries in seq order plus any warnings."""

    entries: List[JournalEntry] = field(default_factory=list)
    warnings: List[JournalWarning] = field(default_factory=list)
    valid_bytes: int = 0

    def __iter__(self) -> Iterator[JournalEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def last_seq(self) -> int:
        return self.entries[-1].seq if self.entries else 0

    @property
    def corrupt_tail(self) -> bool:
        return any(w.code == "CORRUPT_TAIL" for w in self.warnings)


def _parse_line(raw: bytes) -> Optional[JournalEntry]:
    """Decode and verify one line; None when it is not a valid entry."""
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return None
    if not isinstance(obj, dict):
        return None
    seq, checksum, record = obj.get("seq"), obj.get("checksum"), obj.get("record")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 1:
        return None
    if not isinstance(checksum, str) or not isinstance(record, dict):
        return None
    if record_checksum(seq, record) != checksum:
        return None
    return JournalEntry(seq=seq, record=record, checksum=checksum)


def parse_journal_bytes(data: bytes, source: str = "<journal>") -> JournalReadResult:
    """
    Parse journal content.

    A bad final line (unterminated, unparsable, or failing its checksum) is
    reported as CORRUPT_TAIL and the valid prefix is returned. A bad line
    anywhere else raises.

    Args:
        data: Raw file content.
        source: Name used in messages.

    Returns:
        The parsed entries and warnings.

    Raises:
        JournalError: CORRUPT_INTERIOR.
    """
    result = JournalReadResult()
    lines = data.split(b"\n")
    # split() leaves "" after a final newline; anything else is an unterminated line
    trailing = lines.pop()
    offset = 0
    previous_seq: Optional[int] = None

    for index, raw in enumerate(lines):
        line_number = index + 1
        is_last = index == len(lines) - 1 and not trailing
        entry = _parse_line(raw)
        problem = None
        if entry is None:
            problem = "line does not parse or its checksum does not verify"
        elif previous_seq is not None and entry.seq != previous_seq + 1:
            problem = f"seq {entry.seq} does not follow {previous_seq}"

        if problem:
            if is_last:
                result.warnings.append(JournalWarning("CORRUPT_TAIL", line_number, offset, problem))
                return result
            raise JournalError(
                "CORRUPT_INTERIOR",
                f"{source} line {line_number}: {problem}",
                {"path": source, "line": line_number, "offset": offset},
            )

        assert entry is not None
        result.entries.append(entry)
        previous_seq = entry.seq
        offset += len(raw) + 1
        result.valid_bytes = offset

    if trailing:
        result.warnings.append(
            JournalWarning("CORRUPT_TAIL", len(lines) + 1, offset, f"unterminated final line ({len(trailing)} bytes)")
        )
    return result


def read_all(journal_path: PathLike) -> JournalReadResult:
    """
    Read every entry of a journal file in seq order.

    Raises:
        JournalError: IO_ERROR or CORRUPT_INTERIOR.
    """
    path = Path(journal_path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise JournalError("IO_ERROR", f"cannot read journal {path}: {e.strerror or e}", {"path": str(path)})
    result = parse_journal_bytes(data, str(path))
    for warning in result.warnings:
        logger.warning("%s: %s", path, warning)
    return result


def rotated_paths(journal_path: PathLike) -> List[Path]:
    """Return the cut-over files next to a journal, oldest first."""
    path = Path(journal_path)
    found: List[Tuple[int, Path]] = []
    for sibling in path.parent.glob(f"{path.stem}.*{path.suffix}"):
        middle = sibling.name[len(path.stem) + 1 : len(sibling.name) - len(path.suffix)]
        if middle.isdigit():
            found.append((int(middle), sibling))
    return [p for _, p in sorted(found)]


def read_history(journal_path: PathLike) -> JournalReadResult:
    """Read the cut-over files and the live journal as one sequence."""
    combined = JournalReadResult()
    for part in [*rotated_paths(journal_path), Path(journal_path)]:
        if not part.exists():
            continue
        result = read_all(part)
        combined.entries.extend(result.entries)
        combined.warnings.extend(result.warnings)
    return combined


class Journal:
    """
    Single-writer append-only journal.

    The first append scans the existing file to continue numbering and cuts
    off a torn final line left by a crash.
    """

    def __init__(self, journal_path: PathLike, max_bytes: int = DEFAULT_JOURNAL_MAX_BYTES):
        self.path = Path(journal_path)
        self.max_bytes = max_bytes
        self._lock = threading.Lock()
        self._last_seq: Optional[int] = None

    @property
    def last_seq(self) -> int:
        with self._lock:
            return self._recover()

    def append(self, record: Dict[str, Any]) -> int:
        """
        Durably append a record.

        Args:
            record: JSON-serializable record.

        Returns:
            The assigned seq.

        Raises:
            JournalError: IO_ERROR.
        """
        with self._lock:
            last_seq = self._recover()
            self._maybe_cut_over()
            entry = JournalEntry.build(last_seq + 1, record)
            line = entry.to_line().encode("utf-8")
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o600)
                try:
                    written = os.write(fd, line)
                    while written < len(line):
                        written += os.write(fd, line[written:])
                    os.fsync(fd)
                finally:
                    os.close(fd)
            except OSError as e:
                raise JournalError(
                    "IO_ERROR", f"cannot append to {self.path}: {e.strerror or e}", {"path": str(self.path)}
                )
            self._last_seq = entry.seq
            return entry.seq

    def read_all(self) -> JournalReadResult:
        """Read the live journal file."""
        return read_all(self.path)

    def _recover(self) -> int:
        if self._last_seq is not None:
            return self._last_seq
        last_seq = 0
        if self.path.exists():
            result = read_all(self.path)
            if result.corrupt_tail:
                logger.warning("truncating torn tail of %s at byte %d", self.path, result.valid_bytes)
                try:
                    os.truncate(self.path, result.valid_bytes)
                except OSError as e:
                    raise JournalError(
                        "IO_ERROR", f"cannot truncate {self.path}: {e.strerror or e}", {"path": str(self.path)}
                    )
            last_seq = result.last_seq
        if last_seq == 0:
            # empty live file after a cut-over: continue from the newest rotated file
            rotated = rotated_paths(self.path)
            if rotated:
                last_seq = read_all(rotated[-1]).last_seq
        self._last_seq = last_seq
        return last_seq

    def _maybe_cut_over(self) -> None:
        try:
            size = self.path.stat().st_size
        except FileNotFoundError:
            return
        if size < self.max_bytes:
            return
        rotated = rotated_paths(self.path)
        next_index = 1
        if rotated:
            last = rotated[-1].name
            next_index = int(last[len(self.path.stem) + 1 : len(last) - len(self.path.suffix)]) + 1
        target = self.path.with_name(f"{self.path.stem}.{next_index}{self.path.suffix}")
        os.replace(self.path, target)
        logger.info("journal %s reached %d bytes; continued in a new file after %s", self.path, size, target.name)


_open_journals: Dict[Path, Journal] = {}
_registry_lock = threading.Lock()


def open_journal(journal_path: PathLike, max_bytes: int = DEFAULT_JOURNAL_MAX_BYTES) -> Journal:
    """Return the process-wide writer for a journal path."""
    key = Path(journal_path).resolve()
    with _registry_lock:
        journal = _open_journals.get(key)
        if journal is None:
            journal = Journal(key, max_bytes)
            _open_journals[key] = journal
        else:
            journal.max_bytes = max_bytes
        return journal


def append(journal_path: PathLike, record: Dict[str, Any]) -> int:
    """Append a record through the shared writer for ``journal_path``."""
    return open_journal(journal_path).append(record)


def journal_path_for(store_dir: PathLike) -> Path:
    """Location of the journal inside a store directory."""
    return Path(store_dir) / JOURNAL_FILE


def filter_entries(
    entries: List[JournalEntry],
    outcome: Optional[str] = None,
    since: Optional[datetime] = None,
) -> List[JournalEntry]:
    """
    Select transaction entries by outcome and start time.

    Args:
        entries: Entries to filter.
        outcome: Keep only this outcome (case-insensitive).
        since: Keep only transactions started at or after this time.

    Returns:
        The matching entries, in order.
    """
    selected = []
    for entry in entries:
        record = entry.record
        if outcome and str(record.get("outcome", "")).upper() != outcome.upper():
            continue
        if since is not None:
            started = record.get("started_at")
            if not started or datetime.fromisoformat(started) < since:
                continue
        selected.append(entry)
    return selected


def entries_frame(entries: List[JournalEntry]) -> pd.DataFrame:
    """Flatten transaction entries into a table, one row per transaction."""
    rows = []
    for entry in entries:
        record = entry.record
        if record.get("kind", "TRANSACTION") != "TRANSACTION":
            continue
        timings = record.get("timings") or {}
        rows.append(
            {
                "seq": entry.seq,
                "txn_id": record.get("txn_id"),
                "outcome": record.get("outcome"),
                "decision": (record.get("decision") or {}).get("class"),
                "command": record.get("command_raw"),
                "snapshot_ms": timings.get("snapshot_ms", 0.0),
                "execute_ms": timings.get("execute_ms", 0.0),
                "total_ms": timings.get("total_ms", 0.0),
            }
        )
    return pd.DataFrame(
        rows,
        columns=["seq", "txn_id", "outcome", "decision", "command", "snapshot_ms", "execute_ms", "total_ms"],
    )


def outcome_stats(entries: List[JournalEntry]) -> pd.DataFrame:
    """Count and mean phase timings per outcome."""
    frame = entries_frame(entries)
    if frame.empty:
        return pd.DataFrame(columns=["count", "mean_snapshot_ms", "mean_execute_ms", "mean_total_ms"])
    grouped = frame.groupby("outcome")
    stats = pd.DataFrame(
        {
            "count": grouped.size(),
            "mean_snapshot_ms": grouped["snapshot_ms"].mean(),
            "mean_execute_ms": grouped["execute_ms"].mean(),
            "mean_total_ms": grouped["total_ms"].mean(),
        }
    )
    return stats.round(3)
