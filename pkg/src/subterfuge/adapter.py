"""Bridge to external detectors over a newline-delimited stdin/stdout protocol.

Wire format (UTF-8, one message per line)::

    adapter -> READY                      once, after startup
    engine  -> SCAN <absolute-path>
    adapter -> SCORE <float in [0,1]>
             | DECISION MALICIOUS | DECISION BENIGN
             | ERROR <message>
    engine  -> QUIT                       adapter exits 0

Boolean decisions map to scores 1.0 / 0.0.
"""

from __future__ import annotations

import logging
import math
import os
import queue
import shlex
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

from .detectors import Detector, DetectorError, ScanResult, decide

log = logging.getLogger(__name__)


class AdapterError(DetectorError):
    pass


class AdapterTimeout(AdapterError):
    pass


class AdapterProtocolError(AdapterError):
    pass


class AdapterCrashed(AdapterError):
    pass


class AdapterScanError(AdapterError):
    """The adapter answered ``ERROR <message>``."""


@dataclass(frozen=True)
class AdapterConfig:
    command: Sequence[str]
    startup_timeout: float = 10.0
    scan_timeout: float = 30.0
    restart_on_error: bool = True

    def __post_init__(self):
        if isinstance(self.command, str):
            object.__setattr__(self, "command", tuple(shlex.split(self.command)))
        else:
            object.__setattr__(self, "command", tuple(self.command))
        if not self.command:
            raise ValueError("adapter command is empty")
        if self.startup_timeout <= 0 or self.scan_timeout <= 0:
            raise ValueError("adapter timeouts must be positive")


def parse_reply(line: str) -> float:
    """Turn one reply line into a score, or raise."""
    text = line.strip()
    head, _, rest = text.partition(" ")
    if head == "SCORE":
        try:
            value = float(rest)
        except ValueError:
            raise AdapterProtocolError(f"unparseable score in {text!r}") from None
        if not (0.0 <= value <= 1.0) or math.isnan(value):
            raise AdapterProtocolError(f"score out of range in {text!r}")
        return value
    if head == "DECISION":
        verdict = rest.strip().upper()
        if verdict == "MALICIOUS":
            return 1.0
        if verdict == "BENIGN":
            return 0.0
        raise AdapterProtocolError(f"unknown decision in {text!r}")
    if head == "ERROR":
        raise AdapterScanError(rest or "adapter reported an error")
    raise AdapterProtocolError(f"unexpected reply {text!r}")


class ExternalDetector(Detector):
    """One adapter process; scans are serialized through it."""

    kind = "external"

    def __init__(self, config: AdapterConfig, id: str = "external", threshold: float = 0.5):
        super().__init__(id, threshold, reentrant=False)
        self.config = config
        self._proc: Optional[subprocess.Popen] = None
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self.restarts = 0

    # -- process management

    def _pump(self, stream, sink):
        for line in stream:
            sink.put(line)
        sink.put(None)

    def start(self) -> None:
        if self._proc is not None:
            self.restarts += 1
        self._lines = queue.Queue()
        try:
            self._proc = subprocess.Popen(
                list(self.config.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            self._proc = None
            raise AdapterCrashed(f"cannot launch adapter: {exc}") from exc
        threading.Thread(target=self._pump, args=(self._proc.stdout, self._lines),
                         daemon=True).start()
        line = self._read(self.config.startup_timeout, "startup")
        if line.strip() != "READY":
            self._kill()
            raise AdapterProtocolError(f"expected READY, got {line.strip()!r}")

    def _read(self, timeout: float, what: str) -> str:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            self._kill()
            raise AdapterTimeout(f"adapter gave no {what} reply within {timeout}s") from None
        if line is None:
            self._kill()
            raise AdapterCrashed(f"adapter exited during {what}")
        return line

    def _kill(self) -> None:
        proc = self._proc
        if proc is None:
            return
        if proc.poll() is None:
            proc.kill()
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass
        for stream in (proc.stdin, proc.stdout):
            try:
                stream.close()
            except OSError:
                pass

    @property
    def alive(self) -> bool:
        return self._proc is not None and self._proc.poll() is None

    def _ensure_started(self) -> None:
        if self.alive:
            return
        if self._proc is not None and not self.config.restart_on_error:
            raise AdapterCrashed("adapter is not running and restarts are disabled")
        self.start()

    # -- scanning

    def scan_path(self, path) -> float:
        self._ensure_started()
        request = f"SCAN {os.path.abspath(path)}\n"
        try:
            self._proc.stdin.write(request)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            self._kill()
            raise AdapterCrashed("adapter closed its input") from None
        line = self._read(self.config.scan_timeout, "scan")
        try:
            return parse_reply(line)
        except AdapterProtocolError:
            if self.config.restart_on_error:
                self._kill()
            raise

    def score(self, data) -> float:
        fd, path = tempfile.mkstemp(prefix="subterfuge-", suffix=".bin")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            return self.scan_path(path)
        finally:
            os.unlink(path)

    def close(self) -> None:
        proc = self._proc
        if proc is None:
            return
        if proc.poll() is None:
            try:
                proc.stdin.write("QUIT\n")
                proc.stdin.flush()
                proc.wait(timeout=self.config.startup_timeout)
            except (OSError, ValueError, subprocess.TimeoutExpired):
                log.warning("adapter %s did not exit on QUIT; killing", self.id)
        self._kill()
        self._proc = None


def external_scan(detector: ExternalDetector, path) -> ScanResult:
    """Scan a file already on disk through a running adapter."""
    t0 = time.perf_counter()
    with detector._lock:
        score = detector.scan_path(path)
    return ScanResult(score, decide(score, detector.threshold), time.perf_counter() - t0)
