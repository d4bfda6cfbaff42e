"""Shared fixtures for the sandbox test suite."""
import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from modules.policy_engine import default_policy
from modules.transaction_manager import TransactionManager


@pytest.fixture
def workspace(tmp_path):
    """A small workspace with a nested directory and an executable script."""
    root = tmp_path / "workspace"
    (root / "src").mkdir(parents=True)
    (root / "README.md").write_text("# demo\n", encoding="utf-8")
    (root / "src" / "app.py").write_text("print('hello')\n", encoding="utf-8")
    script = root / "run.sh"
    script.write_text("#!/bin/sh\necho run\n", encoding="utf-8")
    script.chmod(0o755)
    return root


@pytest.fixture
def store(tmp_path):
    """Store directory outside the workspace."""
    path = tmp_path / "store"
    path.mkdir()
    return path


@pytest.fixture
def policy():
    return default_policy()


@pytest.fixture
def manager(policy):
    return TransactionManager(policy=policy, default_timeout_ms=10_000)


@pytest.fixture
def handle(manager, workspace, store):
    """An opened workspace."""
    return manager.open_workspace(workspace, store)
