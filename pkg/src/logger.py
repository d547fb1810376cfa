"""Colored console logger for the influential bandit toolkit"""

import inspect
import logging
import os
import sys
from datetime import datetime

SUCCESS = 25

_THIS_FILE = os.path.normcase(os.path.abspath(__file__))


class ColoredFormatter(logging.Formatter):
    """Level colors, caller location, and a worker tag for records from pool processes"""

    COLORS = {
        'DEBUG': '\033[36m',    # Cyan
        'INFO': '\033[32m',     # Green
        'SUCCESS': '\033[92m',  # Bright Green
        'WARNING': '\033[33m',  # Yellow
        'ERROR': '\033[31m',    # Red
        'CRITICAL': '\033[35m', # Magenta
        'RESET': '\033[0m',
    }

    def __init__(self, use_color: bool = True):
        super().__init__()
        self.use_color = use_color

    def _paint(self, levelname: str) -> str:
        if not self.use_color:
            return f"[{levelname}]"
        return f"{self.COLORS.get(levelname, '')}[{levelname}]{self.COLORS['RESET']}"

    def format(self, record):
        stamp = datetime.fromtimestamp(record.created).strftime('%Y-%m-%d %H:%M:%S')
        where = f"{os.path.basename(record.pathname)}:{record.lineno}"
        worker = f" (worker {record.process})" if record.processName != 'MainProcess' else ""

        # 2025-06-19 12:53:56 [INFO] - experiments.py:160 - <msg>
        return f"{stamp} {self._paint(record.levelname)} - {where}{worker} - {record.getMessage()}"


class BanditLogger:
    """Wraps a stdlib logger so records point at the caller, not at this module"""

    def __init__(self, name: str = "influential"):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(logging.INFO)
        self.logger.handlers.clear()
        self.logger.propagate = False

        # Command results go to files; the console stream is stderr only
        handler = logging.StreamHandler(sys.stderr)
        handler.setLevel(logging.INFO)
        handler.setFormatter(ColoredFormatter(use_color=sys.stderr.isatty()))
        self.logger.addHandler(handler)

        for noisy in ('numpy', 'multiprocessing', 'concurrent.futures', 'asyncio'):
            logging.getLogger(noisy).setLevel(logging.WARNING)

    @staticmethod
    def _caller():
        frame = inspect.currentframe()
        try:
            while frame is not None and os.path.normcase(os.path.abspath(frame.f_code.co_filename)) == _THIS_FILE:
                frame = frame.f_back
            if frame is None:
                return "(unknown)", 0
            return frame.f_code.co_filename, frame.f_lineno
        finally:
            del frame

    def _emit(self, level: int, message: str):
        if not self.logger.isEnabledFor(level):
            return
        pathname, lineno = self._caller()
        record = self.logger.makeRecord(self.logger.name, level, pathname, lineno, message, (), None)
        self.logger.handle(record)

    def debug(self, message: str):
        self._emit(logging.DEBUG, message)

    def info(self, message: str):
        self._emit(logging.INFO, message)

    def success(self, message: str):
        self._emit(SUCCESS, message)

    def warning(self, message: str):
        self._emit(logging.WARNING, message)

    def error(self, message: str):
        self._emit(logging.ERROR, message)

    def critical(self, message: str):
        self._emit(logging.CRITICAL, message)

    def step(self, step_num: int, message: str):
        """Numbered stage of a command"""
        self._emit(logging.INFO, f"Step {step_num}: {message}")

    def progress(self, done: int, total: int, message: str):
        self._emit(logging.INFO, f"[{done}/{total}] {message}")

    def set_verbose(self, verbose: bool = True):
        level = logging.DEBUG if verbose else logging.INFO
        self.logger.setLevel(level)
        for handler in self.logger.handlers:
            handler.setLevel(level)


logging.addLevelName(SUCCESS, 'SUCCESS')

logger = BanditLogger()
