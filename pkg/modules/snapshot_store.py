"""
Snapshot Store Module.

Creates, restores and discards bit-exact restore points of a workspace
directory, and computes the deterministic workspace digest used to observe
workspace state.

Digest serialization (one record per entry, entries sorted by the UTF-8 bytes
of their relative path, the root itself excluded)::

    <kind> NUL <rel_path> NUL <mode as 4 octal digits> NUL <hash> LF

``kind`` is ``F``, ``D`` or ``L``; ``hash`` is the SHA-256 hex digest of the
file content (files), of the link target (symlinks) or ``-`` (directories).
Symlink modes are recorded as 0000. The workspace digest is the SHA-256 of the
concatenated records, so an empty tree digests to sha256(b"").

The mode of the root directory is not part of the digest; snapshots keep it in
the manifest header and a restore only verifies once it is back.
"""
import errno
import hashlib
import json
import os
import shutil
import stat
from abc import ABC, abstractmethod
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

from utils.constants import RESTORE_ATTEMPTS, SNAPSHOT_DATA_DIR, SNAPSHOT_MANIFEST
from utils.errors import SnapshotError
from utils.helpers import is_within, iso_timestamp, new_token, utc_now
from utils.logger import get_logger

logger = get_logger(__name__)

_CHUNK = 1024 * 1024
_SNAPSHOT_ID_CHARS = set("0123456789abcdefTZ-")

PathLike = Union[str, Path]


class FileKind(Enum):
    """Kinds of entries a snapshot can hold."""

    FILE = "F"
    DIR = "D"
    SYMLINK = "L"


@dataclass(frozen=True)
class ManifestEntry:
    """One entry of a snapshot manifest."""

    rel_path: str
    kind: FileKind
    size_bytes: int
    mode_bits: int
    content_hash: str = ""
    link_target: str = ""

    def __post_init__(self) -> None:
        parts = self.rel_path.split("/")
        if not self.rel_path or self.rel_path.startswith("/") or ".." in parts:
            raise SnapshotError("IO_ERROR", f"unsafe manifest path {self.rel_path!r}", {"rel_path": self.rel_path})

    def digest_record(self) -> bytes:
        """Canonical record fed into the workspace digest."""
        if self.kind is FileKind.FILE:
            entry_hash = self.content_hash
        elif self.kind is FileKind.SYMLINK:
            entry_hash = hashlib.sha256(_encode(self.link_target)).hexdigest()
        else:
            entry_hash = "-"
        return b"\0".join(
            [self.kind.value.encode(), _encode(self.rel_path), f"{self.mode_bits:04o}".encode(), entry_hash.encode()]
        ) + b"\n"

    def to_line(self) -> str:
        """Manifest line: JSON array in documented field order."""
        return json.dumps(
            [
                self.rel_path,
                self.kind.value,
                self.size_bytes,
                f"{self.mode_bits:04o}",
                self.content_hash,
                self.link_target,
            ]
        )

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        """Parse a manifest line."""
        rel_path, kind, size, mode, content_hash, link_target = json.loads(line)
        return cls(rel_path, FileKind(kind), int(size), int(mode, 8), content_hash, link_target)


@dataclass(frozen=True)
class WorkspaceDigest:
    """Deterministic combined hash of a directory tree."""

    value: str
    file_count: int
    total_bytes: int

    def to_dict(self) -> Dict[str, Any]:
        """Serialize the digest."""
        return {"value": self.value, "file_count": self.file_count, "total_bytes": self.total_bytes}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WorkspaceDigest":
        """Rebuild a digest from its dictionary form."""
        return cls(data["value"], int(data["file_count"]), int(data["total_bytes"]))


@dataclass(frozen=True)
class Snapshot:
    """A restore point of a workspace root."""

    id: str
    source_root: Path
    storage_path: Path
    created_at: datetime
    manifest: Tuple[ManifestEntry, ...]
    pre_digest: WorkspaceDigest
    root_mode: Optional[int] = None

    @property
    def data_path(self) -> Path:
        """Directory holding the copied tree."""
        return self.storage_path / SNAPSHOT_DATA_DIR

    @property
    def manifest_path(self) -> Path:
        """Path of the manifest file."""
        return self.storage_path / SNAPSHOT_MANIFEST


@dataclass(frozen=True)
class RestoreReport:
    """Outcome of a verified restore."""

    snapshot_id: str
    restored_digest: WorkspaceDigest
    verified: bool
    attempts: int

    def to_dict(self) -> Dict[str, Any]:
        """Serialize the report."""
        return {
            "snapshot_id": self.snapshot_id,
            "restored_digest": self.restored_digest.to_dict(),
            "verified": self.verified,
            "attempts": self.attempts,
        }


def _encode(text: str) -> bytes:
    return text.encode("utf-8", "surrogateescape")


def _sort_key(entry: ManifestEntry) -> bytes:
    return _encode(entry.rel_path)


def digest_entries(entries: List[ManifestEntry]) -> WorkspaceDigest:
    """
    Combine manifest entries into a workspace digest.

    Args:
        entries: Entries in any order.

    Returns:
        The WorkspaceDigest over the canonical serialization.
    """
    hasher = hashlib.sha256()
    file_count = 0
    total_bytes = 0
    for entry in sorted(entries, key=_sort_key):
        hasher.update(entry.digest_record())
        if entry.kind is FileKind.FILE:
            file_count += 1
            total_bytes += entry.size_bytes
    return WorkspaceDigest(hasher.hexdigest(), file_count, total_bytes)


def _hash_file(path: Path, copy_to: Optional[Path] = None) -> str:
    """Hash a file, optionally copying it in the same pass."""
    hasher = hashlib.sha256()
    with open(path, "rb") as src:
        if copy_to is None:
            for chunk in iter(lambda: src.read(_CHUNK), b""):
                hasher.update(chunk)
        else:
            with open(copy_to, "wb") as dst:
                for chunk in iter(lambda: src.read(_CHUNK), b""):
                    hasher.update(chunk)
                    dst.write(chunk)
    return hasher.hexdigest()


def _walk(root: Path) -> Iterator[Tuple[str, os.DirEntry, os.stat_result]]:
    """Yield (rel_path, entry, lstat) depth-first in sorted order, never following links."""
    stack: List[Tuple[Path, str]] = [(root, "")]
    while stack:
        directory, prefix = stack.pop()
        with os.scandir(directory) as it:
            children = sorted(it, key=lambda e: _encode(e.name))
        pending: List[Tuple[Path, str]] = []
        for child in children:
            rel_path = f"{prefix}{child.name}"
            st = child.stat(follow_symlinks=False)
            yield rel_path, child, st
            if stat.S_ISDIR(st.st_mode):
                pending.append((Path(child.path), f"{rel_path}/"))
        stack.extend(reversed(pending))


def _entry_for(rel_path: str, path: Path, st: os.stat_result, copy_to: Optional[Path] = None) -> ManifestEntry:
    mode = st.st_mode
    if stat.S_ISLNK(mode):
        target = os.readlink(path)
        if copy_to is not None:
            os.symlink(target, copy_to)
        return ManifestEntry(rel_path, FileKind.SYMLINK, len(_encode(target)), 0, "", target)
    if stat.S_ISDIR(mode):
        if copy_to is not None:
            copy_to.mkdir(mode=0o700)
        return ManifestEntry(rel_path, FileKind.DIR, 0, stat.S_IMODE(mode))
    if stat.S_ISREG(mode):
        content_hash = _hash_file(path, copy_to)
        return ManifestEntry(rel_path, FileKind.FILE, st.st_size, stat.S_IMODE(mode), content_hash)
    raise SnapshotError(
        "IO_ERROR",
        f"unsupported file type at {rel_path!r} (sockets, FIFOs and device nodes are not snapshotted)",
        {"path": str(path)},
    )


def _io_error(message: str, path: Path, cause: OSError) -> SnapshotError:
    return SnapshotError("IO_ERROR", f"{message} {path}: {cause}", {"path": str(path), "cause": str(cause)})


def _grant_owner(path: PathLike) -> None:
    os.chmod(path, stat.S_IMODE(os.lstat(path).st_mode) | stat.S_IRWXU)


def _make_tree_writable(path: Path) -> None:
    """Give the owner rwx on every directory of a tree (links are never followed)."""
    _grant_owner(path)
    for current, dir_names, _ in os.walk(path):
        for name in dir_names:
            child = os.path.join(current, name)
            if not os.path.islink(child):
                _grant_owner(child)


def _force_remove(path: Path) -> None:
    """Remove a file, link or tree even when the command dropped write permission."""
    if path.is_symlink() or not path.is_dir():
        try:
            path.unlink()
        except PermissionError:
            _grant_owner(path.parent)
            path.unlink()
        return
    _make_tree_writable(path)
    shutil.rmtree(path)


def _root_mode_matches(snap: Snapshot) -> bool:
    if snap.root_mode is None:
        return True
    return stat.S_IMODE(os.stat(snap.source_root).st_mode) == snap.root_mode


def _apply_dir_modes(base: Path, entries: List[ManifestEntry]) -> None:
    """Set directory modes deepest-first so writes into them finish first."""
    for entry in sorted((e for e in entries if e.kind is FileKind.DIR), key=_sort_key, reverse=True):
        os.chmod(base / entry.rel_path, entry.mode_bits)


class SnapshotBackend(ABC):
    """Storage backend for restore points."""

    @abstractmethod
    def take(self, root: Path, store_dir: Path) -> Snapshot:
        """Create a restore point of ``root`` under ``store_dir``."""

    @abstractmethod
    def restore_once(self, snap: Snapshot) -> None:
        """Replace the source tree with the snapshot contents (unverified)."""

    @abstractmethod
    def discard(self, snap: Snapshot) -> None:
        """Delete the restore point."""


class CopySnapshotBackend(SnapshotBackend):
    """Full recursive copy with a content manifest."""

    def take(self, root: Path, store_dir: Path) -> Snapshot:
        snapshot_id = new_token()
        storage_path = store_dir / snapshot_id
        data_path = storage_path / SNAPSHOT_DATA_DIR
        created_at = utc_now()

        try:
            root_mode = stat.S_IMODE(os.stat(root).st_mode)
            self._check_space(root, store_dir)
            data_path.mkdir(parents=True)
            entries: List[ManifestEntry] = []
            for rel_path, dir_entry, st in _walk(root):
                entries.append(_entry_for(rel_path, Path(dir_entry.path), st, data_path / rel_path))
                if entries[-1].kind is FileKind.FILE:
                    os.chmod(data_path / rel_path, entries[-1].mode_bits)
            _apply_dir_modes(data_path, entries)
            pre_digest = digest_entries(entries)
            self._write_manifest(storage_path, snapshot_id, root, root_mode, created_at, entries, pre_digest)
        except SnapshotError:
            self._cleanup_partial(storage_path)
            raise
        except OSError as e:
            self._cleanup_partial(storage_path)
            if e.errno in (errno.ENOSPC, errno.EDQUOT):
                raise SnapshotError("INSUFFICIENT_SPACE", f"store ran out of space: {e}", {"store_dir": str(store_dir)})
            raise _io_error("cannot snapshot", Path(e.filename or root), e)

        return Snapshot(
            id=snapshot_id,
            source_root=root,
            storage_path=storage_path,
            created_at=created_at,
            manifest=tuple(entries),
            pre_digest=pre_digest,
            root_mode=root_mode,
        )

    def restore_once(self, snap: Snapshot) -> None:
        root = snap.source_root
        if root.is_symlink() or (root.exists() and not root.is_dir()):
            root.unlink()
        root.mkdir(parents=True, exist_ok=True)
        _grant_owner(root)
        for child in list(root.iterdir()):
            _force_remove(child)
        for entry in sorted(snap.manifest, key=_sort_key):
            src = snap.data_path / entry.rel_path
            dst = root / entry.rel_path
            if entry.kind is FileKind.DIR:
                dst.mkdir(mode=0o700)
            elif entry.kind is FileKind.SYMLINK:
                os.symlink(entry.link_target, dst)
            else:
                if not os.access(src, os.R_OK):
                    _grant_owner(src)
                shutil.copyfile(src, dst, follow_symlinks=False)
                os.chmod(dst, entry.mode_bits)
        _apply_dir_modes(root, list(snap.manifest))
        if snap.root_mode is not None:
            os.chmod(root, snap.root_mode)

    def discard(self, snap: Snapshot) -> None:
        if snap.storage_path.exists() or snap.storage_path.is_symlink():
            _force_remove(snap.storage_path)

    def _check_space(self, root: Path, store_dir: Path) -> None:
        needed = 0
        for _, _, st in _walk(root):
            if stat.S_ISREG(st.st_mode):
                needed += st.st_size
        free = shutil.disk_usage(store_dir).free
        if needed > free:
            raise SnapshotError(
                "INSUFFICIENT_SPACE",
                f"snapshot needs {needed} bytes but only {free} are free in {store_dir}",
                {"needed_bytes": needed, "free_bytes": free},
            )

    def _write_manifest(
        self,
        storage_path: Path,
        snapshot_id: str,
        root: Path,
        root_mode: int,
        created_at: datetime,
        entries: List[ManifestEntry],
        pre_digest: WorkspaceDigest,
    ) -> None:
        header = {
            "snapshot_id": snapshot_id,
            "source_root": str(root),
            "root_mode": f"{root_mode:04o}",
            "created_at": iso_timestamp(created_at),
            "pre_digest": pre_digest.to_dict(),
        }
        tmp_path = storage_path / f"{SNAPSHOT_MANIFEST}.tmp"
        with open(tmp_path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header) + "\n")
            for entry in sorted(entries, key=_sort_key):
                f.write(entry.to_line() + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, storage_path / SNAPSHOT_MANIFEST)

    @staticmethod
    def _cleanup_partial(storage_path: Path) -> None:
        if storage_path.exists():
            try:
                _force_remove(storage_path)
            except OSError as e:
                logger.error("could not remove partial snapshot %s: %s", storage_path, e)


class SnapshotStore:
    """Snapshot operations on top of a storage backend."""

    def __init__(self, backend: Optional[SnapshotBackend] = None):
        """
        Initialize the store.

        Args:
            backend: Storage backend; defaults to the copy backend.
        """
        self.backend = backend or CopySnapshotBackend()

    def compute_digest(self, root: PathLike) -> WorkspaceDigest:
        """
        Compute the deterministic digest of a directory tree.

        Args:
            root: Directory to hash.

        Returns:
            WorkspaceDigest over every entry under ``root``.

        Raises:
            SnapshotError: ROOT_NOT_FOUND or IO_ERROR.
        """
        root_path = Path(root)
        if not root_path.is_dir():
            raise SnapshotError(
                "ROOT_NOT_FOUND", f"workspace root {root_path} does not exist", {"root": str(root_path)}
            )
        try:
            entries = [_entry_for(rel, Path(e.path), st) for rel, e, st in _walk(root_path)]
        except OSError as e:
            raise _io_error("cannot read", Path(e.filename or root_path), e)
        return digest_entries(entries)

    def take_snapshot(self, root: PathLike, store_dir: PathLike) -> Snapshot:
        """
        Copy ``root`` into a new restore point under ``store_dir``.

        Raises:
            SnapshotError: ROOT_NOT_FOUND, STORE_INSIDE_ROOT, INSUFFICIENT_SPACE or IO_ERROR.
        """
        root_path = Path(root).resolve()
        store_path = Path(store_dir).resolve()
        if not root_path.is_dir():
            raise SnapshotError(
                "ROOT_NOT_FOUND", f"workspace root {root_path} does not exist", {"root": str(root_path)}
            )
        if is_within(store_path, root_path):
            raise SnapshotError(
                "STORE_INSIDE_ROOT",
                f"store {store_path} lies inside workspace {root_path}",
                {"root": str(root_path), "store_dir": str(store_path)},
            )
        if not store_path.is_dir() or not os.access(store_path, os.W_OK):
            raise SnapshotError(
                "IO_ERROR", f"store {store_path} is not a writable directory", {"store_dir": str(store_path)}
            )

        snap = self.backend.take(root_path, store_path)
        logger.info(
            "snapshot %s taken of %s (%d files, %d bytes)",
            snap.id,
            root_path,
            snap.pre_digest.file_count,
            snap.pre_digest.total_bytes,
        )
        return snap

    def restore_snapshot(self, snap: Snapshot) -> RestoreReport:
        """
        Restore the source root from a snapshot and verify its digest.

        One retry is made when verification fails.

        Raises:
            SnapshotError: SNAPSHOT_MISSING, RESTORE_VERIFY_FAILED or IO_ERROR.
        """
        if not snap.data_path.is_dir() or not snap.manifest_path.is_file():
            raise SnapshotError("SNAPSHOT_MISSING", f"snapshot {snap.id} is missing", {"snapshot_id": snap.id})

        restored: Optional[WorkspaceDigest] = None
        last_error: Optional[str] = None
        for attempt in range(1, RESTORE_ATTEMPTS + 1):
            try:
                self.backend.restore_once(snap)
                restored = self.compute_digest(snap.source_root)
            except OSError as e:
                last_error = str(e)
                logger.warning("restore of %s attempt %d failed: %s", snap.id, attempt, e)
                continue
            except SnapshotError as e:
                last_error = str(e)
                logger.warning("restore of %s attempt %d failed: %s", snap.id, attempt, e)
                continue
            if restored.value == snap.pre_digest.value and _root_mode_matches(snap):
                logger.info("snapshot %s restored and verified (attempt %d)", snap.id, attempt)
                return RestoreReport(snap.id, restored, True, attempt)
            logger.warning(
                "restore of %s attempt %d produced digest %s, expected %s",
                snap.id,
                attempt,
                restored.value,
                snap.pre_digest.value,
            )

        raise SnapshotError(
            "RESTORE_VERIFY_FAILED",
            f"workspace {snap.source_root} could not be restored from {snap.id}",
            {
                "snapshot_id": snap.id,
                "attempts": RESTORE_ATTEMPTS,
                "expected": snap.pre_digest.value,
                "actual": restored.value if restored else None,
                "last_error": last_error,
            },
        )

    def discard_snapshot(self, snap: Snapshot) -> None:
        """
        Delete a snapshot. Discarding a missing snapshot is a no-op.

        Raises:
            SnapshotError: IO_ERROR when deletion is partial (retryable).
        """
        try:
            self.backend.discard(snap)
        except OSError as e:
            raise _io_error("cannot fully discard snapshot at", snap.storage_path, e)
        logger.debug("snapshot %s discarded", snap.id)

    def purge_snapshot_dir(self, storage_path: PathLike) -> None:
        """
        Remove a snapshot directory whose manifest may be unreadable.

        Raises:
            SnapshotError: IO_ERROR when removal fails.
        """
        path = Path(storage_path)
        if not (path.exists() or path.is_symlink()):
            return
        try:
            _force_remove(path)
        except OSError as e:
            raise _io_error("cannot remove snapshot directory", path, e)
        logger.info("snapshot directory %s purged", path)

    def load_snapshot(self, storage_path: PathLike) -> Snapshot:
        """
        Rebuild a Snapshot from its on-disk manifest.

        Raises:
            SnapshotError: SNAPSHOT_MISSING when the manifest is absent or unreadable.
        """
        storage = Path(storage_path)
        try:
            with open(storage / SNAPSHOT_MANIFEST, "r", encoding="utf-8") as f:
                header = json.loads(f.readline())
                entries = tuple(ManifestEntry.from_line(line) for line in f if line.strip())
        except (OSError, ValueError) as e:
            raise SnapshotError("SNAPSHOT_MISSING", f"no readable manifest in {storage}: {e}", {"path": str(storage)})
        return Snapshot(
            id=header["snapshot_id"],
            source_root=Path(header["source_root"]),
            storage_path=storage,
            created_at=datetime.fromisoformat(header["created_at"]),
            manifest=entries,
            pre_digest=WorkspaceDigest.from_dict(header["pre_digest"]),
            root_mode=int(header["root_mode"], 8) if header.get("root_mode") else None,
        )


def is_snapshot_dir(path: Path) -> bool:
    """True for directories named like a snapshot id."""
    name = path.name
    return path.is_dir() and not path.is_symlink() and "T" in name and set(name) <= _SNAPSHOT_ID_CHARS


def list_snapshot_dirs(store_dir: PathLike) -> List[Path]:
    """Snapshot directories present in a store, oldest first."""
    store = Path(store_dir)
    if not store.is_dir():
        return []
    return sorted(p for p in store.iterdir() if is_snapshot_dir(p))


_default_store = SnapshotStore()


def compute_digest(root: PathLike) -> WorkspaceDigest:
    """Compute the digest of ``root`` with the default store."""
    return _default_store.compute_digest(root)


def take_snapshot(root: PathLike, store_dir: PathLike) -> Snapshot:
    """Take a snapshot with the default store."""
    return _default_store.take_snapshot(root, store_dir)


def restore_snapshot(snap: Snapshot) -> RestoreReport:
    """Restore a snapshot with the default store."""
    return _default_store.restore_snapshot(snap)


def discard_snapshot(snap: Snapshot) -> None:
    """Discard a snapshot with the default store."""
    _default_store.discard_snapshot(snap)
