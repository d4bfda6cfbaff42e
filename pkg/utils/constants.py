"""
Constants for the Transactional Sandbox.
"""
from pathlib import Path

# Repository paths
PROJECT_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_POLICY_PATH = PROJECT_ROOT / "policies" / "default_policy.yaml"
SCENARIO_DIR = PROJECT_ROOT / "fixtures" / "scenarios"

# Executor defaults
DEFAULT_TIMEOUT_MS = 120_000
DEFAULT_OUTPUT_CAP = 1024 * 1024  # per stream
KILL_GRACE_SECONDS = 2.0
SHELL = "/bin/sh"
DEFAULT_PATH = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin"
DEFAULT_LANG = "C.UTF-8"

# Store layout
LOCK_FILE = ".lock"
QUARANTINE_FILE = ".quarantine"
JOURNAL_FILE = "journal.log"
SNAPSHOT_DATA_DIR = "data"
SNAPSHOT_MANIFEST = "manifest"
RESTORE_ATTEMPTS = 2  # first try plus one retry

# Digest of an empty tree (sha256 of zero bytes)
EMPTY_DIGEST = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

# Journal
DEFAULT_JOURNAL_MAX_BYTES = 64 * 1024 * 1024

# Agent service
DEFAULT_QUEUE_DEPTH = 32

# CLI exit codes
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_BLOCKED = 3
EXIT_ROLLED_BACK = 4
EXIT_FATAL = 5

OUTCOME_EXIT_CODES = {
    "EXECUTED_SAFE": EXIT_OK,
    "COMMITTED": EXIT_OK,
    "BLOCKED": EXIT_BLOCKED,
    "ROLLED_BACK": EXIT_ROLLED_BACK,
    "FATAL": EXIT_FATAL,
}

# Benchmarks
DEFAULT_SAFETY_ATTEMPTS = 20
DEFAULT_BENCH_REPETITIONS = 10
DEFAULT_BENCH_FILE_COUNT = 2000
DEFAULT_OVERHEAD_SIZES_MB = (10.0, 50.0, 100.0, 250.0)
MONOTONIC_TOLERANCE = 0.10
SNAPSHOT_DOMINANCE_THRESHOLD = 0.5
