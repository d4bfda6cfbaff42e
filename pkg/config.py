"""
Configuration file for the Transactional Sandbox.

Every setting can be overridden through a ``SANDBOX_`` environment variable
(a ``.env`` file in the working directory is loaded first).
"""
import os

from dotenv import load_dotenv

from utils.constants import (
    DEFAULT_JOURNAL_MAX_BYTES,
    DEFAULT_OUTPUT_CAP,
    DEFAULT_POLICY_PATH,
    DEFAULT_QUEUE_DEPTH,
    DEFAULT_TIMEOUT_MS,
)

# Load environment variables from .env file
load_dotenv()

ENV_PREFIX = "SANDBOX_"


def _env_bool(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    try:
        return int(value) if value not in (None, "") else default
    except ValueError:
        return default


class Config:
    """Base configuration class."""

    # Workspace
    WORKSPACE = os.getenv("SANDBOX_WORKSPACE", "")
    STORE = os.getenv("SANDBOX_STORE", "")
    POLICY = os.getenv("SANDBOX_POLICY", str(DEFAULT_POLICY_PATH))

    # Executor
    TIMEOUT_MS = _env_int("SANDBOX_TIMEOUT_MS", DEFAULT_TIMEOUT_MS)
    OUTPUT_CAP = _env_int("SANDBOX_OUTPUT_CAP", DEFAULT_OUTPUT_CAP)

    # Transactions
    VERIFY_DIGESTS = _env_bool("SANDBOX_VERIFY_DIGESTS", True)
    JOURNAL_MAX_BYTES = _env_int("SANDBOX_JOURNAL_MAX_BYTES", DEFAULT_JOURNAL_MAX_BYTES)

    # Agent service
    QUEUE_DEPTH = _env_int("SANDBOX_QUEUE_DEPTH", DEFAULT_QUEUE_DEPTH)

    # Logging
    LOG_LEVEL = os.getenv("SANDBOX_LOG_LEVEL", "INFO")
    LOG_FILE = os.getenv("SANDBOX_LOG_FILE", "")

    # Long acceptance runs in the test suite
    SLOW_TESTS = _env_bool("SANDBOX_SLOW_TESTS", False)


class DevelopmentConfig(Config):
    """Development environment configuration."""

    DEBUG = True
    TESTING = False


class ProductionConfig(Config):
    """Production environment configuration."""

    DEBUG = False
    TESTING = False


class TestingConfig(Config):
    """Testing environment configuration."""

    DEBUG = True
    TESTING = True
    LOG_LEVEL = os.getenv("SANDBOX_LOG_LEVEL", "WARNING")


def get_config() -> Config:
    """
    Get configuration based on environment.

    Returns:
        Configuration object for the current environment.
    """
    env = os.getenv("SANDBOX_ENVIRONMENT", "development").lower()

    if env == "production":
        return ProductionConfig()
    elif env == "testing":
        return TestingConfig()
    else:
        return DevelopmentConfig()
