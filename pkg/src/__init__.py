import logging
import logging.handlers
import os
from pathlib import Path
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level: Optional[str] = None, log_dir: Optional[Path] = None) -> Path:
    """Console plus rotating file logging for every experiment; returns the log file path."""
    log_dir = Path(log_dir or os.getenv('MDPO_LOG_DIR') or Path(__file__).parent.parent / 'logs')
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / 'mdpo.log'

    logging.basicConfig(
        level=(level or os.getenv('MDPO_LOG_LEVEL', 'INFO')).upper(),
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(),
            logging.handlers.RotatingFileHandler(
                log_file,
                maxBytes=1024 * 1024,  # 1MB
                backupCount=5
            )
        ]
    )
    # hypothesis and PyYAML debug output drowns the per-step training logs
    for noisy in ('hypothesis', 'yaml'):
        logging.getLogger(noisy).setLevel(logging.WARNING)
    return log_file


configure_logging()
