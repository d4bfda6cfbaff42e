"""
Helper utilities for the Transactional Sandbox.
"""
import hashlib
import os
import secrets
from datetime import datetime, timezone
from pathlib import Path
from typing import Union

PathLike = Union[str, "os.PathLike[str]"]


def write_text_atomic(file_path: PathLike, content: str) -> None:
    """
    Write a UTF-8 text file through a temporary sibling and rename.

    Args:
        file_path: Destination path.
        content: Content to write.
    """
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(f".{path.name}.tmp-{secrets.token_hex(4)}")
    with open(tmp_path, "w", encoding="utf-8") as f:
        f.write(content)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp_path, path)


def format_percentage(value: float, decimal_places: int = 2) -> str:
    """
    Format a fraction as a percentage string.

    Args:
        value: The fraction (0.145 for 14.5%).
        decimal_places: Number of decimal places to display.

    Returns:
        Formatted percentage string.
    """
    return f"{value * 100:.{decimal_places}f}%"


def format_bytes(num_bytes: int) -> str:
    """Format a byte count using binary units."""
    size = float(num_bytes)
    for unit in ("B", "KiB", "MiB", "GiB"):
        if size < 1024 or unit == "GiB":
            return f"{size:.0f} {unit}" if unit == "B" else f"{size:.1f} {unit}"
        size /= 1024
    return f"{size:.1f} GiB"


def utc_now() -> datetime:
    """Return the current UTC time."""
    return datetime.now(timezone.utc)


def iso_timestamp(moment: datetime) -> str:
    """Render a timestamp as ISO-8601 with microseconds."""
    return moment.isoformat(timespec="microseconds")


def new_token(prefix: str = "") -> str:
    """
    Create a sortable, filesystem-safe identifier.

    The token is a UTC timestamp with microseconds followed by a random suffix.
    """
    stamp = utc_now().strftime("%Y%m%dT%H%M%S%fZ")
    token = f"{stamp}-{secrets.token_hex(4)}"
    return f"{prefix}{token}" if prefix else token


def is_within(path: PathLike, root: PathLike) -> bool:
    """Return True when ``path`` equals ``root`` or lies beneath it."""
    resolved = Path(path).resolve()
    resolved_root = Path(root).resolve()
    return resolved == resolved_root or resolved_root in resolved.parents


def default_store_dir(workspace_root: PathLike) -> Path:
    """
    Pick a store directory for a workspace that lives outside the workspace.

    Args:
        workspace_root: The workspace root.

    Returns:
        ``~/.cache/txsandbox/<name>-<hash>``.
    """
    root = Path(workspace_root).resolve()
    tag = hashlib.sha256(str(root).encode("utf-8", "surrogateescape")).hexdigest()[:12]
    base = Path(os.path.expanduser("~")) / ".cache" / "txsandbox"
    return base / f"{root.name or 'root'}-{tag}"
