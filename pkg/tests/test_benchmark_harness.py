"""Tests for Benchmark Harness module."""
import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from config import get_config
from modules.benchmark_harness import (
    OverheadReport,
    Scenario,
    ScenarioCategory,
    check_overhead_properties,
    generate_workspace,
    load_scenarios,
    reports_frame,
    run_overhead_bench,
    run_safety_suite,
)
from modules.journal import read_all
from modules.snapshot_store import SnapshotStore
from modules.transaction_manager import Outcome, WorkspaceLock
from utils.errors import BenchmarkError


def test_generate_workspace_is_deterministic(tmp_path):
    store = SnapshotStore()
    first = generate_workspace(200_000, 40, seed=7, dest=tmp_path / "a")
    second = generate_workspace(200_000, 40, seed=7, dest=tmp_path / "b")
    other = generate_workspace(200_000, 40, seed=8, dest=tmp_path / "c")

    digest = store.compute_digest(first)
    assert digest == store.compute_digest(second)
    assert digest.value != store.compute_digest(other).value
    assert digest.file_count == 40
    assert digest.total_bytes == 200_000


def test_generate_workspace_shape(tmp_path):
    root = generate_workspace(10_000, 100, seed=1, dest=tmp_path / "ws")
    dirs = [p for p in root.rglob("*") if p.is_dir()]
    files = [p for p in root.rglob("*") if p.is_file()]
    assert len(dirs) == 5
    assert len(files) == 100
    assert all(p.name.startswith("module_") for p in files)
    assert {p.stat().st_mode & 0o777 for p in files} <= {0o644, 0o755}


def test_generate_zero_bytes(tmp_path):
    root = generate_workspace(0, 3, seed=1, dest=tmp_path / "ws")
    assert SnapshotStore().compute_digest(root).total_bytes == 0


def test_generate_workspace_errors(tmp_path):
    with pytest.raises(BenchmarkError) as exc_info:
        generate_workspace(-1, 10, seed=1, dest=tmp_path / "x")
    assert exc_info.value.code == "INVALID_REQUEST"

    busy = tmp_path / "busy"
    busy.mkdir()
    (busy / "keep.txt").write_text("x")
    with pytest.raises(BenchmarkError) as exc_info:
        generate_workspace(100, 2, seed=1, dest=busy)
    assert exc_info.value.code == "IO_ERROR"


def test_shipped_scenarios_cover_every_category():
    scenarios = load_scenarios()
    assert len(scenarios) >= 10
    assert {s.category for s in scenarios} == set(ScenarioCategory)
    for scenario in scenarios:
        assert scenario.expected_outcome is scenario.category.expected_outcome


def test_inconsistent_scenario_is_fixture_error():
    with pytest.raises(BenchmarkError) as exc_info:
        Scenario.from_dict(
            {"name": "bad", "category": "BLACKLISTED", "command": "rm -rf /", "expected_outcome": "COMMITTED"}
        )
    assert exc_info.value.code == "FIXTURE_ERROR"

    with pytest.raises(BenchmarkError):
        Scenario.from_dict({"name": "bad", "category": "NOPE", "command": "ls"})


def test_safety_suite_passes(policy, tmp_path):
    """Every shipped scenario ends with its category's outcome."""
    journal = tmp_path / "safety.log"
    report = run_safety_suite(policy, attempts_per_category=3, journal_path=journal)

    assert report.passed, report.failures
    for result in report.categories.values():
        assert result.attempts == 3
        assert result.success_rate == 1.0

    records = [e.record for e in read_all(journal)]
    assert len(records) == 12
    assert {r["category"] for r in records} == {c.value for c in ScenarioCategory}

    frame = report.to_frame()
    assert list(frame["Success rate"]) == ["100%"] * 4
    assert report.to_dict()["passed"] is True


def test_safety_suite_reports_failures(policy):
    """A scenario whose command does not fail is reported against its category."""
    scenario = Scenario(
        name="does-not-fail",
        category=ScenarioCategory.STATE_CORRUPTION,
        command="touch created.txt",
        setup={"generate": {"size_bytes": 1000, "file_count": 2, "seed": 1}},
        expected_outcome=Outcome.ROLLED_BACK,
    )
    report = run_safety_suite(policy, attempts_per_category=2, scenarios=[scenario])
    assert not report.passed
    assert report.categories[ScenarioCategory.STATE_CORRUPTION].successes == 0
    assert report.failures[0].actual == "COMMITTED"
    assert report.failures[0].expected == "ROLLED_BACK"


@pytest.mark.slow
@pytest.mark.skipif(not get_config().SLOW_TESTS, reason="set SANDBOX_SLOW_TESTS=1")
def test_safety_suite_full_run(policy):
    report = run_safety_suite(policy, attempts_per_category=20)
    assert report.passed
    assert all(r.attempts == 20 for r in report.categories.values())


def test_overhead_bench_small(policy, tmp_path):
    sizes = [64 * 1024, 512 * 1024]
    reports = run_overhead_bench(
        "sh -c true", sizes, repetitions=3, policy=policy, file_count=20, lock_path=tmp_path / "bench.lock"
    )
    assert [r.workspace_size_bytes for r in reports] == sizes
    for report in reports:
        assert len(report.baseline_ms) == len(report.sandboxed_ms) == len(report.snapshot_ms) == 3
        assert all(ms > 0 for ms in report.snapshot_ms)
        assert report.resets == 0
    assert len(reports_frame(reports)) == 2
    assert not (tmp_path / "bench.lock").exists()


def test_overhead_bench_resets_changed_workspace(policy, tmp_path):
    reports = run_overhead_bench(
        "touch extra.txt", [4096], repetitions=3, policy=policy, file_count=4, lock_path=tmp_path / "bench.lock"
    )
    assert reports[0].resets > 0


def test_overhead_bench_rejects_non_snapshot_commands(policy, tmp_path):
    with pytest.raises(BenchmarkError) as exc_info:
        run_overhead_bench("ls", [1024], policy=policy, lock_path=tmp_path / "l")
    assert exc_info.value.code == "MISCONFIGURED_BENCH"

    with pytest.raises(BenchmarkError) as exc_info:
        run_overhead_bench("sh -c true", [1024], repetitions=2, policy=policy, lock_path=tmp_path / "l")
    assert exc_info.value.code == "MISCONFIGURED_BENCH"


def test_overhead_bench_busy(policy, tmp_path):
    lock = WorkspaceLock(tmp_path / "bench.lock")
    lock.acquire()
    try:
        with pytest.raises(BenchmarkError) as exc_info:
            run_overhead_bench("sh -c true", [1024], policy=policy, lock_path=lock.path)
        assert exc_info.value.code == "BENCH_BUSY"
    finally:
        lock.release()


def _report(size, baseline, sandboxed, snapshot):
    return OverheadReport(size, 10, 3, [baseline] * 3, [sandboxed] * 3, [snapshot] * 3)


def test_overhead_properties_hold():
    reports = [_report(10, 5.0, 15.0, 8.0), _report(50, 5.0, 45.0, 36.0), _report(100, 5.0, 85.0, 70.0)]
    assert check_overhead_properties(reports) == []
    assert reports[-1].overhead_ms == pytest.approx(80.0)
    assert reports[-1].overhead_pct == pytest.approx(16.0)


def test_overhead_properties_violations():
    falling = [_report(10, 5.0, 30.0, 20.0), _report(100, 5.0, 30.0, 10.0)]
    messages = check_overhead_properties(falling)
    assert len(messages) == 2
    assert "fell" in messages[0]

    # a 5% dip stays inside the tolerance
    assert check_overhead_properties([_report(10, 1.0, 21.0, 20.0), _report(20, 1.0, 21.0, 19.0)]) == []
