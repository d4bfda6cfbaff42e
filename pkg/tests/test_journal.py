"""Tests for Journal module."""
import json
import os
import sys
import threading
from datetime import datetime, timedelta, timezone

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from modules.journal import (
    Journal,
    entries_frame,
    filter_entries,
    outcome_stats,
    parse_journal_bytes,
    read_all,
    read_history,
    record_checksum,
    rotated_paths,
)
from utils.errors import JournalError


@pytest.fixture
def journal_path(tmp_path):
    return tmp_path / "journal.log"


def _txn(outcome, started_at="2026-01-01T00:00:00+00:00", total_ms=1.0):
    return {
        "kind": "TRANSACTION",
        "txn_id": f"txn-{outcome}",
        "outcome": outcome,
        "command_raw": "ls",
        "started_at": started_at,
        "timings": {"snapshot_ms": 0.5, "execute_ms": 0.25, "total_ms": total_ms},
    }


def test_append_assigns_gapless_seq(journal_path):
    journal = Journal(journal_path)
    assert [journal.append({"n": i}) for i in range(5)] == [1, 2, 3, 4, 5]
    result = read_all(journal_path)
    assert [e.seq for e in result] == [1, 2, 3, 4, 5]
    assert [e.record["n"] for e in result] == [0, 1, 2, 3, 4]
    assert result.warnings == []


def test_line_format(journal_path):
    """Each line is one object with seq, checksum and record."""
    Journal(journal_path).append({"b": 1, "a": "é"})
    line = journal_path.read_text(encoding="utf-8")
    assert line.endswith("\n") and line.count("\n") == 1
    obj = json.loads(line)
    assert obj["seq"] == 1
    assert obj["checksum"] == record_checksum(1, {"a": "é", "b": 1})


def test_new_writer_continues_numbering(journal_path):
    Journal(journal_path).append({"n": 1})
    assert Journal(journal_path).append({"n": 2}) == 2


def test_torn_tail_is_reported_and_truncated(journal_path):
    """A crash mid-append leaves a torn line that readers skip and writers cut."""
    journal = Journal(journal_path)
    journal.append({"n": 1})
    journal.append({"n": 2})
    with open(journal_path, "ab") as f:
        f.write(b'{"seq": 3, "check')

    result = read_all(journal_path)
    assert len(result) == 2
    assert result.corrupt_tail

    assert Journal(journal_path).append({"n": 3}) == 3
    result = read_all(journal_path)
    assert [e.seq for e in result] == [1, 2, 3]
    assert not result.corrupt_tail


def test_bad_checksum_on_last_line_is_tail(journal_path):
    journal = Journal(journal_path)
    journal.append({"n": 1})
    journal.append({"n": 2})
    lines = journal_path.read_bytes().split(b"\n")
    lines[1] = lines[1].replace(b'"n":2', b'"n":3')
    journal_path.write_bytes(b"\n".join(lines))

    result = read_all(journal_path)
    assert [e.seq for e in result] == [1]
    assert result.corrupt_tail


def test_interior_corruption_raises(journal_path):
    journal = Journal(journal_path)
    for i in range(3):
        journal.append({"n": i})
    lines = journal_path.read_bytes().split(b"\n")
    lines[1] = b"garbage"
    journal_path.write_bytes(b"\n".join(lines))

    with pytest.raises(JournalError) as exc_info:
        read_all(journal_path)
    assert exc_info.value.code == "CORRUPT_INTERIOR"
    assert exc_info.value.detail["line"] == 2


def test_seq_gap_is_corruption():
    first = json.dumps({"seq": 1, "checksum": record_checksum(1, {}), "record": {}})
    third = json.dumps({"seq": 3, "checksum": record_checksum(3, {}), "record": {}})
    fourth = json.dumps({"seq": 4, "checksum": record_checksum(4, {}), "record": {}})
    with pytest.raises(JournalError):
        parse_journal_bytes(f"{first}\n{third}\n{fourth}\n".encode())


def test_read_missing_journal(tmp_path):
    with pytest.raises(JournalError) as exc_info:
        read_all(tmp_path / "missing.log")
    assert exc_info.value.code == "IO_ERROR"


def test_concurrent_appends_keep_order(journal_path):
    """Appends from many threads through one writer stay gapless."""
    journal = Journal(journal_path)

    def worker(tag):
        for i in range(20):
            journal.append({"tag": tag, "i": i})

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(4)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert [e.seq for e in read_all(journal_path)] == list(range(1, 81))


def test_cut_over_continues_seq(journal_path):
    """Past the size limit the file is renamed and numbering continues."""
    journal = Journal(journal_path, max_bytes=200)
    for i in range(10):
        journal.append({"payload": "x" * 50, "i": i})

    assert rotated_paths(journal_path)
    history = read_history(journal_path)
    assert [e.seq for e in history] == list(range(1, 11))
    assert read_all(journal_path).entries[0].seq > 1

    assert Journal(journal_path, max_bytes=200).append({"i": 10}) == 11


def test_filter_entries(journal_path):
    journal = Journal(journal_path)
    journal.append(_txn("COMMITTED", "2026-01-01T00:00:00+00:00"))
    journal.append(_txn("ROLLED_BACK", "2026-01-02T00:00:00+00:00"))
    journal.append(_txn("COMMITTED", "2026-01-03T00:00:00+00:00"))
    entries = read_all(journal_path).entries

    assert [e.seq for e in filter_entries(entries, outcome="committed")] == [1, 3]
    since = datetime(2026, 1, 2, tzinfo=timezone.utc)
    assert [e.seq for e in filter_entries(entries, since=since)] == [2, 3]
    assert filter_entries(entries, outcome="COMMITTED", since=since + timedelta(days=1))[0].seq == 3


def test_outcome_stats(journal_path):
    journal = Journal(journal_path)
    journal.append(_txn("COMMITTED", total_ms=2.0))
    journal.append(_txn("COMMITTED", total_ms=4.0))
    journal.append(_txn("BLOCKED", total_ms=1.0))
    journal.append({"kind": "QUARANTINE_RESET", "operator_ack": "ok"})
    entries = read_all(journal_path).entries

    frame = entries_frame(entries)
    assert len(frame) == 3
    stats = outcome_stats(entries)
    assert stats.loc["COMMITTED", "count"] == 2
    assert stats.loc["COMMITTED", "mean_total_ms"] == pytest.approx(3.0)
    assert stats.loc["BLOCKED", "count"] == 1


def test_outcome_stats_empty():
    assert outcome_stats([]).empty
