import json
import logging
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from core.config import load_settings
from telemetry.rotation import rotate_logs, enforce_disk_limit

_lock = threading.Lock()
_loggers = {}
_event_log: Optional[str] = None


def get_logger(name: str, level: Optional[str] = None):
    """Get or create a console logger with the specified name."""
    if name not in _loggers:
        logger = logging.getLogger(name)
        logger.setLevel(level or load_settings().log_level)

        handler = logging.StreamHandler()
        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        handler.setFormatter(formatter)
        logger.addHandler(handler)

        _loggers[name] = logger
    elif level:
        _loggers[name].setLevel(level)
    return _loggers[name]


def set_event_log(path: Optional[str]):
    """Redirect the JSON event log (None restores the configured file)."""
    global _event_log
    _event_log = path


def event_log_path() -> str:
    return _event_log or load_settings().log_file


def log_event(event_type: str, data: dict):
    """Append one JSON line describing a toolkit event."""
    entry = {
        "ts": datetime.now(timezone.utc).isoformat(),
        "type": event_type,
        **data
    }
    log_file = event_log_path()

    with _lock:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        rotate_logs(log_file)
        enforce_disk_limit(log_file)

        with open(log_file, "a") as f:
            f.write(json.dumps(entry, default=str) + "\n")
