import logging
import os
import sys
from typing import Optional

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logger(name: str = "lmr", stream: bool = False, log_dir: Optional[str] = None) -> logging.Logger:
    """Set up a logger for one command run"""
    logger = logging.getLogger(name)
    logger.setLevel(logging.INFO)

    # Clear any existing handlers to avoid duplicate logging
    logger.handlers.clear()

    formatter = logging.Formatter(LOG_FORMAT)

    if log_dir is not None:
        run_id = os.getenv("LMR_RUN_ID", "local")
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, f"lmr_{run_id}.log"))
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    if stream:
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    return logger
