"""
Transactional Sandbox - Utils Package
"""

from .helpers import (
    write_text_atomic,
    format_percentage,
    format_bytes,
    utc_now,
    iso_timestamp,
    new_token,
    is_within,
    default_store_dir,
)
from .errors import (
    SandboxError,
    PolicyError,
    SnapshotError,
    ExecutionError,
    TransactionError,
    JournalError,
    ServiceError,
    BenchmarkError,
)
from .logger import get_logger, configure_logging

__all__ = [
    "write_text_atomic",
    "format_percentage",
    "format_bytes",
    "utc_now",
    "iso_timestamp",
    "new_token",
    "is_within",
    "default_store_dir",
    "SandboxError",
    "PolicyError",
    "SnapshotError",
    "ExecutionError",
    "TransactionError",
    "JournalError",
    "ServiceError",
    "BenchmarkError",
    "get_logger",
    "configure_logging",
]
