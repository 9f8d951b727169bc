import logging
import os
import sys

import pandas as pd

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(module)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logger(log_file=None, level=logging.INFO):
    """
    Sets up the root logger for a pipeline run.
    It writes to the console and, when a path is given, appends to a log file.
    """
    logger = logging.getLogger()
    logger.setLevel(level)

    # Prevent duplicate handlers if this function is called multiple times
    if logger.hasHandlers():
        logger.handlers.clear()

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    # --- Console Handler ---
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    # --- File Handler ---
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        file_handler = logging.FileHandler(log_file, mode='a', encoding='utf-8')
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def append_tsv_row(path, row, columns=None):
    """Appends one row to a TSV log, writing the header on first use."""
    frame = pd.DataFrame([row], columns=columns or list(row.keys()))
    write_header = not os.path.exists(path) or os.path.getsize(path) == 0
    frame.to_csv(path, sep='\t', mode='a', header=write_header, index=False)


def truncate_tsv_log(path, last_step, step_column='step'):
    """Drops rows written after `last_step` so a resumed run does not duplicate them."""
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return
    df = pd.read_csv(path, sep='\t')
    kept = df[df[step_column] <= last_step]
    if len(kept) != len(df):
        logging.info(f"Dropping {len(df) - len(kept)} log rows past step {last_step} before resuming.")
        kept.to_csv(path, sep='\t', index=False)
