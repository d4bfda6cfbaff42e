"""
Benchmark Harness Module.

Two experiments run against the transaction manager:

* the safety suite runs the shipped scenario fixtures (whitelisted reads,
  blacklisted destruction, state-corrupting failures and valid changes) and
  checks that each ends with the outcome its category demands;
* the overhead bench times an UNCERTAIN command bare and inside a transaction
  over synthetic workspaces of increasing size.

Scenario manifests are YAML files, one per scenario::

    name: failing-installer
    category: STATE_CORRUPTION
    description: installer mutates the tree, then exits 1
    command: sh install.sh
    setup:
      generate: {size_bytes: 32768, file_count: 12, seed: 3}
      files:
        install.sh: |
          mkdir -p vendor
          ...
      modes:
        install.sh: "0755"
"""
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from modules.command_executor import CommandExecutor, ExecutionRequest
from modules.journal import open_journal
from modules.policy_engine import PolicyClass, PolicySet, classify, default_policy, parse_command
from modules.snapshot_store import SnapshotStore, WorkspaceDigest
from modules.transaction_manager import Outcome, TransactionManager, WorkspaceLock
from utils.constants import (
    DEFAULT_BENCH_FILE_COUNT,
    DEFAULT_BENCH_REPETITIONS,
    DEFAULT_SAFETY_ATTEMPTS,
    MONOTONIC_TOLERANCE,
    SCENARIO_DIR,
    SNAPSHOT_DOMINANCE_THRESHOLD,
)
from utils.errors import BenchmarkError, SandboxError, TransactionError
from utils.helpers import format_bytes, format_percentage
from utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

_EXTENSIONS = (".py", ".txt", ".json", ".md", ".dat")
_WRITE_CHUNK = 4 * 1024 * 1024


class ScenarioCategory(Enum):
    """Safety suite categories and the outcome each requires."""

    WHITELISTED = "WHITELISTED"
    BLACKLISTED = "BLACKLISTED"
    STATE_CORRUPTION = "STATE_CORRUPTION"
    VALID_CHANGE = "VALID_CHANGE"

    @property
    def expected_outcome(self) -> Outcome:
        return _CATEGORY_OUTCOMES[self]


_CATEGORY_OUTCOMES = {
    ScenarioCategory.WHITELISTED: Outcome.EXECUTED_SAFE,
    ScenarioCategory.BLACKLISTED: Outcome.BLOCKED,
    ScenarioCategory.STATE_CORRUPTION: Outcome.ROLLED_BACK,
    ScenarioCategory.VALID_CHANGE: Outcome.COMMITTED,
}


@dataclass(frozen=True)
class Scenario:
    """One safety scenario."""

    name: str
    category: ScenarioCategory
    command: str
    setup: Dict[str, Any] = field(default_factory=dict)
    expected_outcome: Outcome = Outcome.EXECUTED_SAFE
    description: str = ""

    def __post_init__(self) -> None:
        if self.expected_outcome is not self.category.expected_outcome:
            raise BenchmarkError(
                "FIXTURE_ERROR",
                f"scenario {self.name!r}: {self.category.value} requires {self.category.expected_outcome.value}, "
                f"not {self.expected_outcome.value}",
                {"scenario": self.name},
            )

    @classmethod
    def from_dict(cls, data: Dict[str, Any], source: str = "<scenario>") -> "Scenario":
        """
        Build a scenario from a parsed manifest.

        Raises:
            BenchmarkError: FIXTURE_ERROR on missing or invalid fields.
        """
        try:
            category = ScenarioCategory(str(data["category"]).upper())
            expected = data.get("expected_outcome")
            return cls(
                name=str(data["name"]),
                category=category,
                command=str(data["command"]),
                setup=dict(data.get("setup") or {}),
                expected_outcome=Outcome(str(expected).upper()) if expected else category.expected_outcome,
                description=str(data.get("description", "")),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise BenchmarkError("FIXTURE_ERROR", f"invalid scenario manifest {source}: {e}", {"path": source})


def load_scenarios(directory: PathLike = SCENARIO_DIR) -> List[Scenario]:
    """
    Load every ``*.yaml`` scenario manifest in a directory, sorted by file name.

    Raises:
        BenchmarkError: FIXTURE_ERROR.
    """
    scenario_dir = Path(directory)
    if not scenario_dir.is_dir():
        raise BenchmarkError(
            "FIXTURE_ERROR", f"scenario directory {scenario_dir} does not exist", {"path": str(scenario_dir)}
        )
    scenarios = []
    for path in sorted(scenario_dir.glob("*.yaml")):
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as e:
            raise BenchmarkError("FIXTURE_ERROR", f"cannot read {path}: {e}", {"path": str(path)})
        if not isinstance(data, dict):
            raise BenchmarkError("FIXTURE_ERROR", f"{path} must hold a mapping", {"path": str(path)})
        scenarios.append(Scenario.from_dict(data, str(path)))
    return scenarios


# ----------------------------------------------------------------------
# Workspace generation
# ----------------------------------------------------------------------


def _split_sizes(rng: np.random.Generator, total: int, count: int) -> np.ndarray:
    """Split ``total`` bytes into ``count`` lognormal sizes summing exactly to it."""
    weights = rng.lognormal(mean=0.0, sigma=1.5, size=count)
    sizes = np.floor(weights / weights.sum() * total).astype(np.int64)
    sizes[int(np.argmax(sizes))] += total - int(sizes.sum())
    return sizes


def generate_workspace(size_bytes: int, file_count: int, seed: int, dest: Optional[PathLike] = None) -> Path:
    """
    Create a deterministic synthetic project tree.

    Args:
        size_bytes: Total bytes across all files (0 gives empty files).
        file_count: Number of files.
        seed: Random seed; equal arguments give equal digests.
        dest: Directory to fill; must be absent or empty. A temporary
            directory is created when omitted.

    Returns:
        The workspace root.

    Raises:
        BenchmarkError: INVALID_REQUEST or IO_ERROR.
    """
    if size_bytes < 0 or file_count <= 0:
        raise BenchmarkError(
            "INVALID_REQUEST",
            "size_bytes must be >= 0 and file_count > 0",
            {"size_bytes": size_bytes, "file_count": file_count},
        )
    rng = np.random.default_rng(seed)
    root = Path(dest) if dest is not None else Path(tempfile.mkdtemp(prefix="txsandbox-ws-"))

    try:
        root.mkdir(parents=True, exist_ok=True)
        if any(root.iterdir()):
            raise BenchmarkError("IO_ERROR", f"destination {root} is not empty", {"dest": str(root)})

        dirs = [""]
        for index in range(max(1, file_count // 20)):
            parent = dirs[int(rng.integers(len(dirs)))]
            dirs.append(os.path.join(parent, f"pkg_{index:03d}") if parent else f"pkg_{index:03d}")
        for rel_dir in dirs[1:]:
            (root / rel_dir).mkdir(parents=True, exist_ok=True)
            os.chmod(root / rel_dir, 0o755)

        sizes = _split_sizes(rng, size_bytes, file_count)
        for index in range(file_count):
            rel_dir = dirs[int(rng.integers(len(dirs)))]
            ext = _EXTENSIONS[int(rng.integers(len(_EXTENSIONS)))]
            mode = 0o755 if rng.random() < 0.1 else 0o644
            path = root / rel_dir / f"module_{index:05d}{ext}"
            remaining = int(sizes[index])
            with open(path, "wb") as f:
                while remaining > 0:
                    chunk = min(remaining, _WRITE_CHUNK)
                    f.write(rng.bytes(chunk))
                    remaining -= chunk
            os.chmod(path, mode)
    except OSError as e:
        raise BenchmarkError("IO_ERROR", f"cannot generate workspace in {root}: {e}", {"dest": str(root)})

    logger.debug("generated %s: %d files, %s, seed %d", root, file_count, format_bytes(size_bytes), seed)
    return root


def prepare_scenario_workspace(scenario: Scenario, root: Path) -> None:
    """
    Populate a fresh workspace as the scenario's setup describes.

    Raises:
        BenchmarkError: FIXTURE_ERROR.
    """
    setup = scenario.setup
    try:
        generate = setup.get("generate")
        if generate:
            generate_workspace(
                int(generate.get("size_bytes", 0)),
                int(generate.get("file_count", 1)),
                int(generate.get("seed", 0)),
                root,
            )
        else:
            root.mkdir(parents=True, exist_ok=True)
        for rel_path, content in (setup.get("files") or {}).items():
            path = root / rel_path
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(str(content), encoding="utf-8")
            os.chmod(path, 0o644)
        for rel_path, mode in (setup.get("modes") or {}).items():
            os.chmod(root / rel_path, int(str(mode), 8))
    except (OSError, ValueError, TypeError, SandboxError) as e:
        raise BenchmarkError(
            "FIXTURE_ERROR", f"setup of scenario {scenario.name!r} failed: {e}", {"scenario": scenario.name}
        )


# ----------------------------------------------------------------------
# Safety suite
# ----------------------------------------------------------------------


@dataclass
class CategoryResult:
    """Attempts and successes for one category."""

    category: ScenarioCategory
    attempts: int = 0
    successes: int = 0

    @property
    def success_rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0


@dataclass(frozen=True)
class SafetyFailure:
    """An attempt whose outcome or digest check did not hold."""

    scenario: str
    category: ScenarioCategory
    expected: str
    actual: str
    reason: str


@dataclass
class SafetyReport:
    """Per-category results of the safety suite."""

    categories: Dict[ScenarioCategory, CategoryResult]
    failures: List[SafetyFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(r.successes == r.attempts for r in self.categories.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "categories": {
                cat.value: {
                    "expected_outcome": cat.expected_outcome.value,
                    "attempts": result.attempts,
                    "successes": result.successes,
                    "success_rate": result.success_rate,
                }
                for cat, result in self.categories.items()
            },
            "failures": [
                {
                    "scenario": f.scenario,
                    "category": f.category.value,
                    "expected": f.expected,
                    "actual": f.actual,
                    "reason": f.reason,
                }
                for f in self.failures
            ],
            "passed": self.passed,
        }

    def to_frame(self) -> pd.DataFrame:
        """One row per category, shaped like a results table."""
        rows = [
            {
                "Category": cat.value,
                "Expected": cat.expected_outcome.value,
                "Attempts": result.attempts,
                "Successes": result.successes,
                "Success rate": format_percentage(result.success_rate, 0),
            }
            for cat, result in self.categories.items()
        ]
        return pd.DataFrame(rows)


def _run_attempt(
    scenario: Scenario,
    policy: PolicySet,
    store: SnapshotStore,
    journal_path: Optional[Path],
) -> Tuple[str, Optional[str]]:
    """Run one attempt in a fresh workspace; return (actual outcome, failure reason or None)."""
    with tempfile.TemporaryDirectory(prefix="txsandbox-safety-") as tmp:
        root = Path(tmp) / "workspace"
        store_dir = Path(tmp) / "store"
        prepare_scenario_workspace(scenario, root)
        manager = TransactionManager(policy=policy, store=store)
        ws = manager.open_workspace(root, store_dir)
        before = store.compute_digest(root)

        record = manager.run_transaction(ws, scenario.command)
        if journal_path is not None:
            open_journal(journal_path).append(
                {**record.to_dict(), "scenario": scenario.name, "category": scenario.category.value}
            )

        if record.outcome is not scenario.expected_outcome:
            return record.outcome.value, f"expected {scenario.expected_outcome.value}, got {record.outcome.value}"
        after = store.compute_digest(root)
        if record.outcome in (Outcome.ROLLED_BACK, Outcome.BLOCKED) and after.value != before.value:
            return record.outcome.value, "workspace digest changed"
        if record.outcome is Outcome.ROLLED_BACK and (
            record.post_digest is None or record.post_digest.value != before.value
        ):
            return record.outcome.value, "recorded post-rollback digest differs from the pre-digest"
        if record.outcome is Outcome.COMMITTED and after.value == before.value:
            return record.outcome.value, "committed change left the workspace unchanged"
        leftovers = [p for p in store_dir.iterdir() if p.is_dir()]
        if leftovers:
            return record.outcome.value, f"snapshot residue left: {[p.name for p in leftovers]}"
    return record.outcome.value, None


def run_safety_suite(
    policy: Optional[PolicySet] = None,
    attempts_per_category: int = DEFAULT_SAFETY_ATTEMPTS,
    scenarios: Optional[Sequence[Scenario]] = None,
    journal_path: Optional[PathLike] = None,
) -> SafetyReport:
    """
    Run every category ``attempts_per_category`` times.

    Attempts cycle through the category's scenarios; each runs in a fresh
    workspace.

    Args:
        policy: Rule set; the default policy when omitted.
        attempts_per_category: Attempts per category.
        scenarios: Scenarios to run; the shipped fixtures when omitted.
        journal_path: Optional journal receiving every attempt's record.

    Returns:
        The SafetyReport.

    Raises:
        BenchmarkError: FIXTURE_ERROR.
    """
    policy = policy or default_policy()
    scenarios = list(scenarios) if scenarios is not None else load_scenarios()
    store = SnapshotStore()
    journal = Path(journal_path) if journal_path else None
    report = SafetyReport(categories={cat: CategoryResult(cat) for cat in ScenarioCategory})

    for category in ScenarioCategory:
        members = [s for s in scenarios if s.category is category]
        if not members:
            logger.warning("no scenarios for category %s", category.value)
            continue
        result = report.categories[category]
        for attempt in range(attempts_per_category):
            scenario = members[attempt % len(members)]
            try:
                actual, reason = _run_attempt(scenario, policy, store, journal)
            except BenchmarkError:
                raise
            except SandboxError as e:
                actual, reason = "ERROR", f"{e.code}: {e.message}"
            result.attempts += 1
            if reason is None:
                result.successes += 1
                continue
            report.failures.append(
                SafetyFailure(scenario.name, category, scenario.expected_outcome.value, actual, reason)
            )
            logger.warning("scenario %s attempt %d failed: %s", scenario.name, attempt + 1, reason)

        logger.info(
            "%s: %d/%d (%s)",
            category.value,
            result.successes,
            result.attempts,
            format_percentage(result.success_rate, 0),
        )
    return report


# ----------------------------------------------------------------------
# Overhead bench
# ----------------------------------------------------------------------


def _stats(samples: List[float]) -> Dict[str, float]:
    if not samples:
        return {"mean": 0.0, "min": 0.0, "max": 0.0}
    arr = np.asarray(samples, dtype=float)
    return {"mean": float(arr.mean()), "min": float(arr.min()), "max": float(arr.max())}


@dataclass
class OverheadReport:
    """Bare versus transactional timings for one workspace size."""

    workspace_size_bytes: int
    file_count: int
    repetitions: int
    baseline_ms: List[float] = field(default_factory=list)
    sandboxed_ms: List[float] = field(default_factory=list)
    snapshot_ms: List[float] = field(default_factory=list)
    resets: int = 0

    @property
    def mean_baseline(self) -> float:
        return _stats(self.baseline_ms)["mean"]

    @property
    def mean_sandboxed(self) -> float:
        return _stats(self.sandboxed_ms)["mean"]

    @property
    def overhead_ms(self) -> float:
        return self.mean_sandboxed - self.mean_baseline

    @property
    def overhead_pct(self) -> float:
        """Overhead as a fraction of the baseline mean."""
        return self.overhead_ms / self.mean_baseline if self.mean_baseline > 0 else float("nan")

    @property
    def snapshot_ms_mean(self) -> float:
        return _stats(self.snapshot_ms)["mean"]

    @property
    def snapshot_share(self) -> float:
        """Fraction of the overhead spent taking the snapshot."""
        return self.snapshot_ms_mean / self.overhead_ms if self.overhead_ms > 0 else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "workspace_size_bytes": self.workspace_size_bytes,
            "file_count": self.file_count,
            "repetitions": self.repetitions,
            "baseline_ms": self.baseline_ms,
            "sandboxed_ms": self.sandboxed_ms,
            "snapshot_ms": self.snapshot_ms,
            "baseline": _stats(self.baseline_ms),
            "sandboxed": _stats(self.sandboxed_ms),
            "snapshot": _stats(self.snapshot_ms),
            "mean_baseline": self.mean_baseline,
            "mean_sandboxed": self.mean_sandboxed,
            "overhead_ms": self.overhead_ms,
            "overhead_pct": self.overhead_pct,
            "snapshot_ms_mean": self.snapshot_ms_mean,
            "resets": self.resets,
        }


def reports_frame(reports: Sequence[OverheadReport]) -> pd.DataFrame:
    """Render overhead reports as a table with mean and min/max per series."""

    def cell(samples: List[float]) -> str:
        s = _stats(samples)
        return f"{s['mean']:.1f} [{s['min']:.1f}, {s['max']:.1f}]"

    rows = [
        {
            "Workspace": format_bytes(r.workspace_size_bytes),
            "Files": r.file_count,
            "Reps": r.repetitions,
            "Baseline ms": cell(r.baseline_ms),
            "Sandboxed ms": cell(r.sandboxed_ms),
            "Snapshot ms": cell(r.snapshot_ms),
            "Overhead ms": round(r.overhead_ms, 1),
            "Overhead": format_percentage(r.overhead_pct, 1) if r.mean_baseline > 0 else "n/a",
        }
        for r in reports
    ]
    return pd.DataFrame(rows)


def check_overhead_properties(
    reports: Sequence[OverheadReport],
    tolerance: float = MONOTONIC_TOLERANCE,
    dominance: float = SNAPSHOT_DOMINANCE_THRESHOLD,
) -> List[str]:
    """
    Check the structural properties of an overhead series.

    Snapshot time must not decrease across increasing sizes (within
    ``tolerance``) and must account for more than ``dominance`` of the
    overhead at the largest size.

    Returns:
        Human-readable violations; empty when every property holds.
    """
    ordered = sorted(reports, key=lambda r: r.workspace_size_bytes)
    violations = []
    for smaller, larger in zip(ordered, ordered[1:]):
        if larger.snapshot_ms_mean < smaller.snapshot_ms_mean * (1.0 - tolerance):
            violations.append(
                f"snapshot time fell from {smaller.snapshot_ms_mean:.1f} ms "
                f"({format_bytes(smaller.workspace_size_bytes)}) "
                f"to {larger.snapshot_ms_mean:.1f} ms ({format_bytes(larger.workspace_size_bytes)})"
            )
    if ordered:
        largest = ordered[-1]
        if not largest.overhead_ms > 0 or not largest.snapshot_share > dominance:
            violations.append(
                f"snapshot time {largest.snapshot_ms_mean:.1f} ms is not more than {dominance:.0%} "
                f"of the {largest.overhead_ms:.1f} ms overhead at {format_bytes(largest.workspace_size_bytes)}"
            )
    return violations


def _bench_lock_path() -> Path:
    return Path(tempfile.gettempdir()) / "txsandbox-bench.lock"


def run_overhead_bench(
    command: str,
    sizes: Sequence[int],
    repetitions: int = DEFAULT_BENCH_REPETITIONS,
    policy: Optional[PolicySet] = None,
    file_count: int = DEFAULT_BENCH_FILE_COUNT,
    seed: int = 1,
    lock_path: Optional[PathLike] = None,
) -> List[OverheadReport]:
    """
    Time ``command`` bare and transactionally over workspaces of each size.

    Runs alternate bare and transactional executions; one extra warm-up
    round per size is discarded. A workspace whose digest drifts from the
    generated one is regenerated before the next transactional run.

    Args:
        command: Command classified UNCERTAIN by ``policy``.
        sizes: Workspace sizes in bytes.
        repetitions: Measured rounds per size (at least 3).
        policy: Rule set; the default policy when omitted.
        file_count: Files per generated workspace.
        seed: Generation seed.
        lock_path: Bench lock file.

    Returns:
        One OverheadReport per size that completed.

    Raises:
        BenchmarkError: MISCONFIGURED_BENCH or BENCH_BUSY.
    """
    policy = policy or default_policy()
    decision = classify(parse_command(command), policy)
    if decision.policy_class is not PolicyClass.UNCERTAIN:
        raise BenchmarkError(
            "MISCONFIGURED_BENCH",
            f"{command!r} is {decision.policy_class.value}; only UNCERTAIN commands take the snapshot path",
            {"class": decision.policy_class.value},
        )
    if repetitions < 3:
        raise BenchmarkError("MISCONFIGURED_BENCH", "repetitions must be at least 3", {"repetitions": repetitions})

    lock = WorkspaceLock(Path(lock_path) if lock_path else _bench_lock_path())
    try:
        lock.acquire()
    except TransactionError as e:
        raise BenchmarkError("BENCH_BUSY", f"another benchmark is running ({e.message})", e.detail)

    reports = []
    try:
        for size in sizes:
            report = _bench_size(command, int(size), repetitions, policy, file_count, seed)
            if report is not None:
                reports.append(report)
    finally:
        lock.release()
    return reports


def _bench_size(
    command: str,
    size: int,
    repetitions: int,
    policy: PolicySet,
    file_count: int,
    seed: int,
) -> Optional[OverheadReport]:
    store = SnapshotStore()
    executor = CommandExecutor()
    manager = TransactionManager(policy=policy, executor=executor, store=store, verify_digests=False)
    report = OverheadReport(workspace_size_bytes=size, file_count=file_count, repetitions=repetitions)

    with tempfile.TemporaryDirectory(prefix="txsandbox-bench-") as tmp:
        root = Path(tmp) / "workspace"
        generate_workspace(size, file_count, seed, root)
        reference: WorkspaceDigest = store.compute_digest(root)
        ws = manager.open_workspace(root, Path(tmp) / "store")
        logger.info("benchmarking %s over %s (%d files)", command, format_bytes(size), file_count)

        def reset_if_changed() -> None:
            if store.compute_digest(root).value != reference.value:
                shutil.rmtree(root)
                generate_workspace(size, file_count, seed, root)
                report.resets += 1

        try:
            for round_index in range(repetitions + 1):
                t0 = time.perf_counter()
                executor.execute(ExecutionRequest(command=command, cwd=root))
                baseline = (time.perf_counter() - t0) * 1000.0
                reset_if_changed()

                t0 = time.perf_counter()
                record = manager.run_transaction(ws, command)
                sandboxed = (time.perf_counter() - t0) * 1000.0
                if record.outcome not in (Outcome.COMMITTED, Outcome.ROLLED_BACK):
                    raise BenchmarkError(
                        "MISCONFIGURED_BENCH",
                        f"transaction ended {record.outcome.value}",
                        {"error": record.error.to_dict() if record.error else None},
                    )
                reset_if_changed()

                if round_index == 0:
                    continue
                report.baseline_ms.append(baseline)
                report.sandboxed_ms.append(sandboxed)
                report.snapshot_ms.append(record.timings.snapshot_ms)
        except BenchmarkError:
            raise
        except SandboxError as e:
            logger.error("overhead run at %s aborted: %s", format_bytes(size), e)
            return None

    logger.info(
        "%s: baseline %.1f ms, sandboxed %.1f ms, overhead %.1f ms (%s), snapshot %.1f ms",
        format_bytes(size),
        report.mean_baseline,
        report.mean_sandboxed,
        report.overhead_ms,
        format_percentage(report.overhead_pct, 1) if report.mean_baseline > 0 else "n/a",
        report.snapshot_ms_mean,
    )
    return report
