"""Locked, atomic file writes for simulation outputs and manifests."""
import json
import fcntl
import os
import tempfile
import threading
from contextlib import contextmanager
from typing import Any, Dict, Iterator, TextIO
from pathlib import Path
import logging

logger = logging.getLogger(__name__)


class FileLockManager:
    """Manages per-path thread locks."""

    _instance = None
    _lock = threading.Lock()
    _file_locks: Dict[str, threading.Lock] = {}

    def __new__(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super().__new__(cls)
                    cls._instance._file_locks = {}
        return cls._instance

    def get_lock(self, filepath: str) -> threading.Lock:
        """Get or create a lock for a specific file."""
        with self._lock:
            key = os.path.abspath(filepath)
            if key not in self._file_locks:
                self._file_locks[key] = threading.Lock()
            return self._file_locks[key]


@contextmanager
def atomic_text_file(filepath: str) -> Iterator[TextIO]:
    """Write a text file atomically: readers see the old file or the complete new one.

    Concurrent writers to the same path are serialised by a thread lock and
    an OS-level lock on a sidecar ``.lock`` file.
    """
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    thread_lock = FileLockManager().get_lock(str(path))

    with thread_lock:
        with open(f"{path}.lock", 'w') as lock_file:
            fcntl.flock(lock_file.fileno(), fcntl.LOCK_EX)
            fd, tmp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            try:
                with os.fdopen(fd, 'w', newline='') as f:
                    yield f
                    f.flush()
                    os.fsync(f.fileno())
                os.replace(tmp_path, path)
            except BaseException:
                if os.path.exists(tmp_path):
                    os.remove(tmp_path)
                raise
            finally:
                fcntl.flock(lock_file.fileno(), fcntl.LOCK_UN)
        try:
            os.remove(f"{path}.lock")
        except OSError:
            pass


def safe_json_write(filepath: str, data: Any) -> bool:
    """Atomically write JSON; returns False and logs on failure."""
    try:
        with atomic_text_file(filepath) as f:
            json.dump(data, f, indent=2, default=str)
        return True
    except Exception as e:
        logger.error(f"Error writing {filepath}: {e}")
        return False


def safe_json_read(filepath: str, default: Any = None) -> Any:
    """Read JSON, returning default when the file is missing or corrupt."""
    try:
        with open(filepath, 'r') as f:
            return json.load(f)
    except FileNotFoundError:
        return default if default is not None else {}
    except json.JSONDecodeError:
        logger.warning(f"Corrupted JSON in {filepath}")
        return default if default is not None else {}
