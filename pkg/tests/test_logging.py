"""
测试日志功能
"""
import logging
from unittest.mock import patch

import pytest

from ivuq.utils import logger as logger_module
from ivuq.utils.logger import cleanup_old_logs, get_log_size_info, logger, set_verbose


@pytest.fixture
def log_dir(tmp_path):
    with patch.object(logger_module, "LOGS_DIR", tmp_path):
        yield tmp_path


class TestLogger:
    """测试日志器配置"""

    def test_named_logger(self):
        assert logger.name == "ivuq"
        assert logger.propagate is False
        assert logger.handlers

    def test_verbose_toggles_debug(self):
        set_verbose(True)
        try:
            assert logger.level == logging.DEBUG
            assert all(h.level in (logging.DEBUG, logging.ERROR) for h in logger.handlers)
        finally:
            set_verbose(False)
        assert logger.level == logger_module.log_level


class TestLogFiles:
    """测试日志目录统计与清理"""

    def test_size_info(self, log_dir):
        (log_dir / "ivuq.log").write_bytes(b"x" * 2048)
        (log_dir / "error.log").write_bytes(b"")
        (log_dir / "notes.txt").write_bytes(b"x" * 4096)
        info = get_log_size_info()
        assert info["file_count"] == 2
        assert info["total_size_mb"] == round(2048 / 1024 / 1024, 2)

    def test_missing_directory(self, tmp_path):
        with patch.object(logger_module, "LOGS_DIR", tmp_path / "absent"):
            assert get_log_size_info() == {"file_count": 0, "total_size_mb": 0}
            cleanup_old_logs(1)

    def test_cleanup_removes_oversized_files(self, log_dir):
        big = log_dir / "ivuq.log.1"
        small = log_dir / "ivuq.log"
        big.write_bytes(b"x" * (2 * 1024 * 1024))
        small.write_bytes(b"x" * 10)
        cleanup_old_logs(max_size_mb=1)
        assert not big.exists()
        assert small.exists()
