#!/usr/bin/env python
import logging
from pathlib import Path
from typing import Optional

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
LOG_NAME = "run.log"
FINISHED = "finished"
ERROR_NAME = "error.txt"


def run_logger(name: str, log_file: Optional[Path], level: int = logging.INFO) -> logging.Logger:
    """The logger of a single run, writing into its own file; handlers of a
    previous run with the same name are dropped"""
    logger = logging.getLogger(f"run.{name.replace('.', '-')}")
    for handler in logger.handlers:
        handler.close()
    logger.handlers = []
    logger.setLevel(level)
    if log_file is not None:
        file_handler = logging.FileHandler(log_file, "w")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(file_handler)
    return logger


class RunContext:
    def __init__(
        self,
        out_dir: Path,
        trace_name: str,
        point_name: str,
        level: int = logging.INFO,
    ):
        """Keeps the directory and the logger of one simulation run:
        <out_dir>/<trace_name>/<point_name>/"""
        self.out_dir = Path(out_dir)
        self.trace_name = trace_name
        self.point_name = point_name
        self.level = level
        self._logger = None  # type: Optional[logging.Logger]

    @property
    def name(self) -> str:
        return f"{self.trace_name}/{self.point_name}"

    @property
    def run_dir(self) -> Path:
        run_dir = self.out_dir / self.trace_name / self.point_name
        run_dir.mkdir(0o750, parents=True, exist_ok=True)
        return run_dir

    @property
    def log_file(self) -> Path:
        return self.run_dir / LOG_NAME

    @property
    def logger(self) -> logging.Logger:
        if self._logger is None:
            self._logger = run_logger(
                self.name.replace("/", "."), self.log_file, self.level
            )
        return self._logger

    def close(self) -> None:
        if self._logger is None:
            return
        for handler in self._logger.handlers:
            handler.close()
        self._logger.handlers = []

    @property
    def is_finished(self) -> bool:
        return (self.out_dir / self.trace_name / self.point_name / FINISHED).exists()

    def mark_finished(self) -> None:
        self.logger.info("Mark the run %s as finished", self.name)
        (self.run_dir / ERROR_NAME).unlink(missing_ok=True)
        (self.run_dir / FINISHED).touch()

    def mark_failed(self, traceback: str) -> None:
        self.logger.error("The run %s failed", self.name)
        (self.run_dir / FINISHED).unlink(missing_ok=True)
        (self.run_dir / ERROR_NAME).write_text(traceback)
