"""Randomized end-to-end properties of the sandbox.

The default run uses reduced trial counts; SANDBOX_SLOW_TESTS=1 runs the full counts.
"""
import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest
import yaml

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from config import get_config
from modules.benchmark_harness import check_overhead_properties, generate_workspace, run_overhead_bench
from modules.journal import Journal, read_all
from modules.snapshot_store import SnapshotStore, list_snapshot_dirs
from modules.transaction_manager import Outcome, TransactionManager
from utils.constants import DEFAULT_OVERHEAD_SIZES_MB

SLOW = get_config().SLOW_TESTS
CLI = os.path.join(os.path.dirname(__file__), '..', 'cli.py')


def _trials(full, reduced):
    return full if SLOW else reduced


def _files(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file() and not p.is_symlink())


def _mutation_script(rng, files):
    """Shell text that changes the tree in a few random ways and then fails."""
    steps = []
    for _ in range(int(rng.integers(1, 5))):
        target = files[int(rng.integers(len(files)))]
        action = int(rng.integers(6))
        if action == 0:
            steps.append(f"printf garbage > '{target}'")
        elif action == 1:
            steps.append(f"rm -f '{target}'")
        elif action == 2:
            steps.append(f"printf more >> '{target}'")
        elif action == 3:
            steps.append(f"chmod 600 '{target}'")
        elif action == 4:
            steps.append(f"mkdir -p extra_{int(rng.integers(1000))}/deep && touch extra_{int(rng.integers(1000))}.tmp")
        else:
            steps.append(f"ln -sf '{target}' link_{int(rng.integers(1000))}")
    ending = ["exit 1", f"exit {int(rng.integers(2, 255))}", "kill -9 $$"][int(rng.integers(3))]
    return "; ".join(steps + [ending])


def test_failed_commands_leave_no_trace(policy, tmp_path):
    """Mutate-then-fail commands always roll back to the pre-command digest."""
    rng = np.random.default_rng(2024)
    snapshots = SnapshotStore()
    manager = TransactionManager(policy=policy, store=snapshots)
    trials = _trials(500, 25)

    for trial in range(trials):
        root = generate_workspace(
            int(rng.integers(0, 256 * 1024)), int(rng.integers(1, 30)), seed=trial, dest=tmp_path / f"ws{trial}"
        )
        store = tmp_path / f"store{trial}"
        ws = manager.open_workspace(root, store)
        before = snapshots.compute_digest(root)

        record = manager.run_transaction(ws, _mutation_script(rng, _files(root)))

        assert record.outcome is Outcome.ROLLED_BACK, (trial, record.to_dict())
        assert record.post_digest == before
        assert snapshots.compute_digest(root) == before
        assert list_snapshot_dirs(store) == []
        shutil.rmtree(root)


def _random_tree(rng, root):
    root.mkdir()
    dirs = [root]
    for index in range(int(rng.integers(0, 5))):
        child = dirs[int(rng.integers(len(dirs)))] / f"d{index}"
        child.mkdir()
        dirs.append(child)
    files = []
    for index in range(int(rng.integers(1, 12))):
        path = dirs[int(rng.integers(len(dirs)))] / f"f{index}.bin"
        path.write_bytes(rng.bytes(int(rng.integers(0, 4096))))
        path.chmod([0o644, 0o600, 0o755, 0o444][int(rng.integers(4))])
        files.append(path)
    for index in range(int(rng.integers(0, 3))):
        target = files[int(rng.integers(len(files)))]
        (root / f"link{index}").symlink_to(os.path.relpath(target, root))
    if rng.random() < 0.3:
        (root / "dangling").symlink_to("nowhere")
    return files


def _mangle(rng, root, files):
    """Adversarial edits: content, type, mode, links, additions and removals."""
    for path in files:
        choice = int(rng.integers(6))
        if not path.exists():
            continue
        if choice == 0:
            path.chmod(0o644)
            path.write_bytes(b"overwritten")
        elif choice == 1:
            path.unlink()
        elif choice == 2:
            path.unlink()
            path.mkdir()
            (path / "inside").write_text("x")
        elif choice == 3:
            path.chmod(0o777)
        elif choice == 4:
            path.unlink()
            path.symlink_to("/etc/hostname")
    for link in root.glob("link*"):
        link.unlink()
        link.symlink_to("elsewhere")
    (root / "added").mkdir(exist_ok=True)
    (root / "added" / "new.txt").write_text("new")


def test_snapshot_round_trip_on_random_trees(tmp_path):
    """Snapshot, mangle, restore gives the original digest and no residue."""
    rng = np.random.default_rng(7)
    snapshots = SnapshotStore()
    trials = _trials(200, 20)

    for trial in range(trials):
        root = tmp_path / f"tree{trial}"
        store = tmp_path / f"store{trial}"
        files = _random_tree(rng, root)
        before = snapshots.compute_digest(root)

        snap = snapshots.take_snapshot(root, store)
        _mangle(rng, root, files)
        report = snapshots.restore_snapshot(snap)
        snapshots.discard_snapshot(snap)

        assert report.verified
        assert snapshots.compute_digest(root) == before, trial
        assert not store.exists() or list(store.iterdir()) == []


def test_journal_recovers_all_but_torn_line(tmp_path):
    """A truncated final line costs exactly that entry."""
    path = tmp_path / "journal.log"
    journal = Journal(path)
    for index in range(1000):
        journal.append({"kind": "TRANSACTION", "n": index})

    data = path.read_bytes()
    last_line_start = data.rstrip(b"\n").rfind(b"\n") + 1
    with open(path, "r+b") as f:
        f.truncate(last_line_start + (len(data) - last_line_start) // 2)

    result = read_all(path)
    assert len(result) == 999
    assert result.corrupt_tail
    assert [e.seq for e in result] == list(range(1, 1000))


def test_service_runs_headless(workspace, store, tmp_path):
    """Ten requests on a pipe, no terminal: ten correlated responses and nothing else."""
    service_config = tmp_path / "service.yaml"
    service_config.write_text(
        yaml.safe_dump({"workspaces": {"proj": {"root": str(workspace), "store": str(store)}}})
    )
    commands = [
        "ls",
        "cat README.md",
        "pwd",
        "rm -rf /",
        "mkfs.ext4 /dev/sda1",
        "touch half-installed.txt; exit 1",
        "sh -c 'printf partial > src/app.py; kill -9 $$'",
        "echo notes > notes.txt",
        "echo more >> README.md",
        "mkdir -p build && touch build/out.o",
    ]
    requests = "".join(
        json.dumps({"request_id": str(i), "workspace": "proj", "command": c}) + "\n" for i, c in enumerate(commands)
    )

    proc = subprocess.run(
        [sys.executable, CLI, "serve", "--stdio", "--service-config", str(service_config)],
        input=requests.encode(),
        capture_output=True,
        start_new_session=True,
        timeout=120,
        env={**os.environ, "SANDBOX_ENVIRONMENT": "testing"},
    )

    assert proc.returncode == 0, proc.stderr.decode()
    lines = proc.stdout.decode().splitlines()
    assert len(lines) == 10
    responses = {r["request_id"]: r for r in map(json.loads, lines)}
    assert set(responses) == {str(i) for i in range(10)}
    assert [responses[str(i)]["outcome"] for i in range(10)] == [
        "EXECUTED_SAFE",
        "EXECUTED_SAFE",
        "EXECUTED_SAFE",
        "BLOCKED",
        "BLOCKED",
        "ROLLED_BACK",
        "ROLLED_BACK",
        "COMMITTED",
        "COMMITTED",
        "COMMITTED",
    ]
    assert (workspace / "src" / "app.py").read_text() == "print('hello')\n"
    assert not (workspace / "half-installed.txt").exists()


@pytest.mark.slow
@pytest.mark.skipif(not SLOW, reason="set SANDBOX_SLOW_TESTS=1")
def test_snapshot_cost_grows_with_workspace_size(policy, tmp_path):
    sizes = [int(mb * 1024 * 1024) for mb in DEFAULT_OVERHEAD_SIZES_MB]
    reports = run_overhead_bench("sh -c true", sizes, repetitions=5, policy=policy, lock_path=tmp_path / "bench.lock")
    assert len(reports) == 4
    assert check_overhead_properties(reports) == []
