"""
Logging configuration for ivuq
"""
import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Dict, List

from ivuq.config import settings

LOGS_DIR = Path(settings.log_dir)

# Create logger
logger = logging.getLogger("ivuq")

# Set log level based on environment
if settings.debug:
    log_level = logging.DEBUG
else:
    log_level = logging.INFO

logger.setLevel(log_level)

# Create formatter with filename and line number
formatter = logging.Formatter(
    '%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)

# Create handlers if not exists
if not logger.handlers:
    # Console handler (stderr, stdout stays clean for command output)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if settings.log_to_file:
        LOGS_DIR.mkdir(parents=True, exist_ok=True)

        # File handler - general log (rotating by size)
        file_handler = RotatingFileHandler(
            LOGS_DIR / "ivuq.log",
            maxBytes=settings.log_max_size_mb * 1024 * 1024,
            backupCount=settings.log_backup_count,
            encoding='utf-8'
        )
        file_handler.setLevel(log_level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

        # Error log file handler (separate file for errors)
        error_handler = RotatingFileHandler(
            LOGS_DIR / "error.log",
            maxBytes=settings.log_max_size_mb * 1024 * 1024,
            backupCount=settings.log_backup_count,
            encoding='utf-8'
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(formatter)
        logger.addHandler(error_handler)

# Prevent duplicate logs
logger.propagate = False


def set_verbose(verbose: bool) -> None:
    """Switch DEBUG logging on or off (CLI --verbose)."""
    level = logging.DEBUG if verbose else log_level
    logger.setLevel(level)
    for handler in logger.handlers:
        if handler.level != logging.ERROR:
            handler.setLevel(level)


def _log_files() -> List[Path]:
    """Current and rotated log files (``*.log``, ``*.log.N``)."""
    if not LOGS_DIR.is_dir():
        return []
    return sorted(p for p in LOGS_DIR.glob("*.log*") if p.is_file())


def cleanup_old_logs(max_size_mb: int = 50) -> int:
    """Delete log files (rotated backups included) larger than max_size_mb; returns how many went."""
    limit = max_size_mb * 1024 * 1024
    deleted = 0
    try:
        oversized = [(p, p.stat().st_size) for p in _log_files() if p.stat().st_size > limit]
    except OSError as e:
        logger.error(f"清理日志时出错: {e}")
        return 0
    for path, size in oversized:
        try:
            path.unlink()
        except OSError as e:
            logger.error(f"删除日志文件失败 {path.name}: {e}")
            continue
        deleted += 1
        logger.info(f"已删除超大日志文件: {path.name} ({size / 1024 / 1024:.2f}MB)")
    if deleted:
        logger.info(f"日志清理完成，共删除 {deleted} 个文件")
    return deleted


def get_log_size_info() -> Dict[str, float]:
    """Number of log files and their total size in MB, two decimals."""
    try:
        sizes = [p.stat().st_size for p in _log_files()]
    except OSError as e:
        logger.error(f"获取日志大小信息时出错: {e}")
        sizes = []
    return {"file_count": len(sizes), "total_size_mb": round(sum(sizes) / 1024 / 1024, 2)}
