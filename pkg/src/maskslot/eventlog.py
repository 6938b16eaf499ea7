"""Event logging to <run_dir>/events.log."""

from datetime import datetime
from pathlib import Path
from typing import Any, List, Mapping, Optional

from .config import LOG_FILE


def format_event(kind: str, fields: Optional[Mapping[str, Any]] = None) -> str:
    """One line: ``timestamp; KIND; Key: value; ...``."""
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    parts = [timestamp, kind]
    for key, value in (fields or {}).items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}: {value}")
    return "; ".join(parts) + "\n"


def log_event(
    kind: str, fields: Optional[Mapping[str, Any]] = None, log_file: Optional[Path] = None
) -> None:
    """Append an event."""
    log_file = log_file or LOG_FILE
    log_file.parent.mkdir(parents=True, exist_ok=True)
    with open(log_file, "a") as f:
        f.write(format_event(kind, fields))


def read_events(log_file: Optional[Path] = None, kind: Optional[str] = None) -> List[str]:
    """Logged lines, optionally only those of one kind."""
    log_file = log_file or LOG_FILE
    if not log_file.exists():
        return []
    lines = [line for line in log_file.read_text().splitlines() if line.strip()]
    if kind is None:
        return lines
    return [line for line in lines if line.split("; ")[1:2] == [kind]]
