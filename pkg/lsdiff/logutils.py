import os
import sys
import logging
from os import path
from typing import Optional

LOG_FORMAT = '%(asctime)s: %(message)s'
DATE_FORMAT = '%m/%d %I:%M:%S %p'


def setup_logging(run_dir: Optional[str] = None, level: str = "INFO", logfile: str = "logfile.log") -> logging.Logger:
    """
    Configure the root logger with a console handler and, when ``run_dir`` is
    given, a file handler writing ``<run_dir>/<logfile>``. Safe to call again
    for a new run directory: handlers from a previous call are replaced.
    """
    root = logging.getLogger()
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    for h in list(root.handlers):
        if getattr(h, "_lsdiff", False):
            root.removeHandler(h)
            h.close()

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)
    console._lsdiff = True
    root.addHandler(console)

    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        file_handler = logging.FileHandler(path.join(run_dir, logfile))
        file_handler.setFormatter(formatter)
        file_handler._lsdiff = True
        root.addHandler(file_handler)
    return root
