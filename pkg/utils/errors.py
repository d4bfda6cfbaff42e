"""
Error types for the Transactional Sandbox.

Every error carries a stable string ``code`` so callers (and agents reading
service responses) can branch on it without parsing prose.
"""
from typing import Any, Dict, Optional


class SandboxError(Exception):
    """Base error with a machine-readable code."""

    def __init__(self, code: str, message: str, detail: Optional[Dict[str, Any]] = None):
        """
        Initialize the error.

        Args:
            code: Stable error code, e.g. ``SNAPSHOT_MISSING``.
            message: Human-readable description.
            detail: Optional structured context.
        """
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.detail: Dict[str, Any] = dict(detail or {})

    def to_dict(self) -> Dict[str, Any]:
        """Return the error as a plain dictionary."""
        return {"code": self.code, "message": str(self), "detail": self.detail}


class PolicyError(SandboxError):
    """Raised by command parsing and policy loading."""


class SnapshotError(SandboxError):
    """Raised by snapshot creation, restore and discard."""


class ExecutionError(SandboxError):
    """Raised when a command cannot be spawned."""


class TransactionError(SandboxError):
    """Raised when a transaction cannot start."""


class JournalError(SandboxError):
    """Raised on journal I/O failures and interior corruption."""


class ServiceError(SandboxError):
    """Raised by the agent service for registry and transport failures."""


class BenchmarkError(SandboxError):
    """Raised by the benchmark harness."""
