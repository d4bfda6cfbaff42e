"""
Transactional Sandbox

Runs agent-issued shell commands as atomic transactions:
- Policy classification of compound commands (SAFE / UNSAFE / UNCERTAIN)
- Snapshot before uncertain commands, verified rollback on failure
- Checksummed append-only journal of every transaction
- Headless newline-delimited JSON service for agents
- Safety suite and snapshot-overhead bench
"""

__version__ = "1.0.0"
__license__ = "MIT"

from modules import (
    TransactionManager,
    AgentService,
    parse_command,
    classify,
    load_policy_file,
)

__all__ = [
    "TransactionManager",
    "AgentService",
    "parse_command",
    "classify",
    "load_policy_file",
]
