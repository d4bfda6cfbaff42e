"""
Logging setup.

Log records always go to stderr (and optionally a file). Stdout is reserved
for ``--json`` documents and for the agent response stream.
"""
import logging
import sys
from typing import Optional

_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
_ROOT_LOGGER = "txsandbox"


def get_logger(name: str) -> logging.Logger:
    """Return a logger namespaced under the package root logger."""
    return logging.getLogger(f"{_ROOT_LOGGER}.{name}")


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    """
    Configure the package root logger once.

    Args:
        level: Logging level name.
        log_file: Optional path of an additional log file.

    Returns:
        The configured root logger.
    """
    root = logging.getLogger(_ROOT_LOGGER)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    root.propagate = False

    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setFormatter(logging.Formatter(_FORMAT))
    root.addHandler(stream_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(_FORMAT))
        root.addHandler(file_handler)

    return root
