#!/usr/bin/env python3
"""Console logging for evsoar-sim.

Lines carry the process header and, for simulation events, the simulated
clock and the emitting node, e.g. ``[evsoar-sim:123] [t=12.402ms edge-1] ...``.
"""

import os
import sys
import time
from enum import IntEnum
from typing import Optional

import colorama

from security import SecurityValidator

colorama.init(autoreset=True)


class LogLevel(IntEnum):
    DEBUG = 10
    INFO = 20
    WARN = 30
    ERROR = 40


class Logger:
    """Formatted, colored and sanitized console output."""

    PROCESS_NAME = "evsoar-sim"
    _level = LogLevel.INFO

    @classmethod
    def set_level(cls, level: LogLevel) -> None:
        cls._level = level

    @classmethod
    def set_verbose(cls, verbose: bool) -> None:
        cls._level = LogLevel.DEBUG if verbose else LogLevel.INFO

    @classmethod
    def quiet(cls) -> None:
        """Only warnings and errors; used by library callers and tests."""
        cls._level = LogLevel.WARN

    @classmethod
    def enabled(cls, level: LogLevel) -> bool:
        return level >= cls._level

    @classmethod
    def debug(cls, *messages: str) -> None:
        if cls.enabled(LogLevel.DEBUG):
            cls._emit(sys.stdout, colorama.Fore.LIGHTBLACK_EX, None, messages)

    @classmethod
    def info(cls, *messages: str) -> None:
        if cls.enabled(LogLevel.INFO):
            cls._emit(sys.stdout, colorama.Fore.CYAN, None, messages)

    @classmethod
    def warn(cls, *messages: str) -> None:
        if cls.enabled(LogLevel.WARN):
            cls._emit(sys.stdout, colorama.Fore.YELLOW, None, messages)

    @classmethod
    def error(cls, *messages: str) -> None:
        cls._emit(sys.stderr, colorama.Fore.RED, None, messages)

    @classmethod
    def sim(cls, clock_ms: float, node: str, *messages: str) -> None:
        """Debug-level simulation trace stamped with the simulated clock."""
        if cls.enabled(LogLevel.DEBUG):
            tag = f"[t={clock_ms:.3f}ms {node}]"
            cls._emit(sys.stdout, colorama.Fore.LIGHTBLACK_EX, tag, messages)

    @classmethod
    def security_event(cls, event_type: str, details: str) -> None:
        """Security events always reach stderr, whatever the level."""
        timestamp = time.strftime("%Y-%m-%d %H:%M:%S")
        cls._emit(
            sys.stderr,
            colorama.Fore.MAGENTA,
            f"[SECURITY:{event_type}] {timestamp}:",
            (details,),
        )

    @classmethod
    def _emit(cls, stream, color: str, tag: Optional[str], messages) -> None:
        sanitized = [SecurityValidator.sanitize_for_logging(str(m)) for m in messages]
        body = " ".join(sanitized)
        if tag:
            body = f"{tag} {body}"
        header = f"[{cls.PROCESS_NAME}:{os.getpid()}]"
        stream.write(f"{color}{header}{colorama.Style.RESET_ALL} {body}\n")
