from pathlib import Path

from core.config import MAX_LOG_SIZE_MB, MAX_LOG_FILES, DISK_USAGE_LIMIT_MB

_MB = 1024 * 1024


def directory_size_mb(path: Path) -> float:
    return sum(p.stat().st_size for p in path.rglob("*") if p.is_file()) / _MB


def rotate_logs(log_file: str, max_size_mb: float = MAX_LOG_SIZE_MB,
                generations: int = MAX_LOG_FILES) -> bool:
    """Shift log -> log.1 -> log.2 ... once the live file reaches max_size_mb.

    Returns True when a rotation happened.
    """
    live = Path(log_file)
    if not live.exists() or live.stat().st_size < max_size_mb * _MB:
        return False

    oldest = Path(f"{live}.{generations}")
    oldest.unlink(missing_ok=True)
    for i in range(generations - 1, 0, -1):
        src = Path(f"{live}.{i}")
        if src.exists():
            src.rename(f"{live}.{i + 1}")
    live.rename(f"{live}.1")
    return True


def enforce_disk_limit(log_file: str, limit_mb: float = DISK_USAGE_LIMIT_MB,
                       generations: int = MAX_LOG_FILES) -> int:
    """Drop the oldest rotated generations until the log directory fits.

    Returns the number of files removed.
    """
    live = Path(log_file)
    directory = live.parent if str(live.parent) else Path(".")
    removed = 0
    for i in range(generations, 0, -1):
        if directory_size_mb(directory) < limit_mb:
            break
        candidate = Path(f"{live}.{i}")
        if candidate.exists():
            candidate.unlink()
            removed += 1
    return removed
