# pylint: disable=logging-fstring-interpolation
import sys
import zlib
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

LOGGER_NAME = "egt_rerank"


def to_path(path: Union[str, Path]) -> Path:
    """ Convert a string to a path, if it is String. """
    if isinstance(path, Path):
        return path
    return Path(path)


def get_logger(
    path: Optional[Path] = None, name: str = LOGGER_NAME, verbose: bool = False
) -> logging.Logger:
    """Set up the package logger: stdout always, a log file if path is given.
    Appends to an existing log file. Calling it again does not stack handlers."""
    formatter = logging.Formatter(
        fmt="%(asctime)s %(levelname)-8s %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
    )
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False
    if not any(getattr(h, "_egt_screen", False) for h in logger.handlers):
        screen_handler = logging.StreamHandler(stream=sys.stdout)
        screen_handler.setFormatter(formatter)
        screen_handler._egt_screen = True  # pylint: disable=protected-access
        logger.addHandler(screen_handler)
    for handler in logger.handlers:
        if getattr(handler, "_egt_screen", False):
            handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    if path is not None:
        log_path = to_path(path).resolve()
        known = [getattr(h, "baseFilename", None) for h in logger.handlers]
        if str(log_path) not in known:
            mode = "a" if log_path.exists() else "w"
            handler = logging.FileHandler(log_path, mode=mode, encoding="utf-8")
            handler.setFormatter(formatter)
            logger.addHandler(handler)
    return logger


def derive_seed(seed: int, purpose: str) -> int:
    """Map the run seed to an independent 64-bit seed per purpose,
    e.g. "synth" or "ransac"."""
    tag = zlib.crc32(purpose.encode("utf-8"))
    state = np.random.SeedSequence([int(seed), tag]).generate_state(1, np.uint64)
    return int(state[0])


class OutputFileLogger:
    """ Context manager to log files created in a directory during execution."""

    def __init__(self, directory: Union[str, Path] = "."):
        self.directory = to_path(directory).resolve()
        self.files_present = self._snapshot()

    def _snapshot(self) -> set[str]:
        if not self.directory.is_dir():
            return set()
        return {str(f.relative_to(self.directory)) for f in self.directory.rglob("*")}

    def __enter__(self):
        return self

    def __exit__(self, _exc_type, _exc_val, _exc_tb):
        new_files = sorted(self._snapshot() - self.files_present)
        logging.getLogger(LOGGER_NAME).info(
            f"Files created in {self.directory}: {new_files}"
        )
