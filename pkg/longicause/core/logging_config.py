import logging
import sys
from contextvars import ContextVar
from pathlib import Path
from logging.handlers import TimedRotatingFileHandler
from datetime import datetime, timedelta
from typing import Optional
from longicause.config import settings

_current_run_id: ContextVar[Optional[str]] = ContextVar("run_id", default=None)


def set_run_id(run_id: Optional[str]) -> None:
    """Bind the run id rendered by RunIDFormatter for the current context."""
    _current_run_id.set(run_id)


def get_run_id() -> Optional[str]:
    return _current_run_id.get()


class RunIDFormatter(logging.Formatter):
    """Custom formatter that includes the active run id in the log line."""

    def format(self, record: logging.LogRecord) -> str:
        run_id = getattr(record, 'run_id', None) or get_run_id()

        # Format: YYYY-MM-DD HH:MM:SS - LEVEL - [RUN_ID] - [file:line] - function - message
        # Outside a run, use [SYSTEM]
        if run_id:
            record.run_tag = f"[{str(run_id).strip('[]')}]"
        else:
            record.run_tag = '[SYSTEM]'

        base_format = '%(asctime)s - %(levelname)s - %(run_tag)s - [%(filename)s:%(lineno)d] - %(funcName)s - %(message)s'
        temp_formatter = logging.Formatter(base_format, datefmt='%Y-%m-%d %H:%M:%S')
        return temp_formatter.format(record)


def setup_logging(log_dir: Optional[str] = None) -> None:
    """
    Configure process-wide logging with daily file rotation.
    Creates the log directory if it doesn't exist and sets up handlers.
    """
    log_dir_path = Path(log_dir or settings.LOG_DIR)
    log_dir_path.mkdir(parents=True, exist_ok=True)

    log_level = settings.get_log_level()
    numeric_level = getattr(logging, log_level.upper(), logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    root_logger.handlers.clear()

    log_format = RunIDFormatter(datefmt='%Y-%m-%d %H:%M:%S')

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(getattr(logging, settings.LOG_CONSOLE_LEVEL.upper(), logging.INFO))
    console_handler.setFormatter(log_format)
    root_logger.addHandler(console_handler)

    # File naming: longicause.log, rotated to longicause.log.YYYY-MM-DD
    log_file = log_dir_path / "longicause.log"
    file_handler = TimedRotatingFileHandler(
        filename=str(log_file),
        when='midnight',
        interval=1,
        backupCount=settings.LOG_RETENTION_DAYS,
        encoding='utf-8'
    )
    file_handler.setLevel(numeric_level)
    file_handler.setFormatter(log_format)
    file_handler.suffix = "%Y-%m-%d"
    root_logger.addHandler(file_handler)

    # Suppress noisy third-party loggers
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("numexpr").setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.info(f"Logging configured - Level: {log_level}, Directory: {log_dir_path.absolute()}")


def attach_run_log(run_dir: Path) -> logging.Handler:
    """Add a `run.log` handler inside a run directory and return it."""
    handler = logging.FileHandler(str(Path(run_dir) / "run.log"), encoding='utf-8')
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(RunIDFormatter(datefmt='%Y-%m-%d %H:%M:%S'))
    logging.getLogger().addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


def cleanup_old_logs(log_dir: Optional[str] = None) -> None:
    """
    Delete rotated log files older than the retention period.
    """
    log_dir_path = Path(log_dir or settings.LOG_DIR)

    if not log_dir_path.exists():
        return

    retention_days = settings.LOG_RETENTION_DAYS
    cutoff_date = datetime.now() - timedelta(days=retention_days)

    logger = logging.getLogger(__name__)
    deleted_count = 0

    for log_file in log_dir_path.glob("longicause.log.*"):
        try:
            # longicause.log.YYYY-MM-DD
            date_str = log_file.suffix.lstrip('.')
            file_date = datetime.strptime(date_str, "%Y-%m-%d")

            if file_date < cutoff_date:
                log_file.unlink()
                deleted_count += 1
                logger.debug(f"Deleted old log file: {log_file.name}")
        except (ValueError, OSError) as e:
            logger.warning(f"Error processing log file {log_file.name}: {str(e)}")

    if deleted_count > 0:
        logger.info(f"Cleaned up {deleted_count} old log file(s) (older than {retention_days} days)")
