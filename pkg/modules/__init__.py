"""
Transactional Sandbox - Modules Package
"""

from .policy_engine import (
    CommandLine,
    Segment,
    PolicyClass,
    PolicyRule,
    PolicySet,
    PolicyDecision,
    parse_command,
    classify,
    load_policy,
    load_policy_file,
    default_policy,
)
from .snapshot_store import SnapshotStore, Snapshot, WorkspaceDigest, RestoreReport, list_snapshot_dirs
from .command_executor import CommandExecutor, ExecutionRequest, ExecutionResult, execute
from .journal import (
    Journal,
    JournalEntry,
    JournalReadResult,
    open_journal,
    read_all,
    read_history,
    filter_entries,
    entries_frame,
    outcome_stats,
)
from .transaction_manager import (
    Outcome,
    ExecOptions,
    TransactionManager,
    TransactionRecord,
    WorkspaceHandle,
    WorkspaceLock,
)
from .agent_service import GUIDANCE, AgentService, ServiceConfig, WorkspaceEntry, serve
from .benchmark_harness import (
    Scenario,
    ScenarioCategory,
    SafetyReport,
    OverheadReport,
    load_scenarios,
    generate_workspace,
    run_safety_suite,
    run_overhead_bench,
    check_overhead_properties,
    reports_frame,
)

__all__ = [
    "CommandLine",
    "Segment",
    "PolicyClass",
    "PolicyRule",
    "PolicySet",
    "PolicyDecision",
    "parse_command",
    "classify",
    "load_policy",
    "load_policy_file",
    "default_policy",
    "SnapshotStore",
    "Snapshot",
    "WorkspaceDigest",
    "RestoreReport",
    "list_snapshot_dirs",
    "CommandExecutor",
    "ExecutionRequest",
    "ExecutionResult",
    "execute",
    "Journal",
    "JournalEntry",
    "JournalReadResult",
    "open_journal",
    "read_all",
    "read_history",
    "filter_entries",
    "entries_frame",
    "outcome_stats",
    "Outcome",
    "ExecOptions",
    "TransactionManager",
    "TransactionRecord",
    "WorkspaceHandle",
    "WorkspaceLock",
    "GUIDANCE",
    "AgentService",
    "ServiceConfig",
    "WorkspaceEntry",
    "serve",
    "Scenario",
    "ScenarioCategory",
    "SafetyReport",
    "OverheadReport",
    "load_scenarios",
    "generate_workspace",
    "run_safety_suite",
    "run_overhead_bench",
    "check_overhead_properties",
    "reports_frame",
]
