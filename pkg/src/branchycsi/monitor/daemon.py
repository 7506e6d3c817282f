"""The streaming monitor: ingest -> window -> infer + alarm -> telemetry.

Stages run on their own threads and talk through bounded queues, so a slow
stage applies backpressure upstream. Telemetry delivery sits behind a
drop-oldest buffer and never blocks inference. A stop request (signal or
:meth:`Monitor.stop`) ends ingestion; windows already queued are still
classified and their records handed to the dispatcher before shutdown.
"""

from __future__ import annotations

import collections
import json
import logging
import queue
import signal
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from ..csi.pcap import ParseStats, PcapFormatError, parse_pcap
from ..csi.preprocess import SubcarrierMask, amplitude_column, preprocess
from ..nn.branchy import BranchyGhostNet, to_model_input
from ..nn.checkpoint import load_weights
from .alarm import AlarmTracker
from .config import MonitorConfig
from .telemetry import TelemetryDispatcher

logger = logging.getLogger(__name__)

_END = object()


@dataclass
class MonitorStats:
    frames: int = 0
    windows: int = 0
    records: int = 0
    alarms: int = 0
    early_exits: int = 0
    delivered: int = 0
    dead_letter: int = 0
    dropped: int = 0
    reconnects: int = 0
    parse: ParseStats = field(default_factory=ParseStats)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["parse"]["skipped"] = self.parse.skipped
        return d

    @property
    def lost(self) -> int:
        """Windows with neither a delivered, dead-lettered nor counted-as-dropped record."""
        return self.windows - self.delivered - self.dead_letter - self.dropped


@dataclass
class Window:
    window_id: int
    start_us: int
    end_us: int
    amplitudes: np.ndarray


class Monitor:
    def __init__(self, config: MonitorConfig, model: Optional[BranchyGhostNet] = None,
                 sink: Optional[Callable[[dict], None]] = None) -> None:
        self.config = config
        if model is None:
            if not config.model_path:
                raise ValueError("monitor needs a model or config.model_path")
            model = load_weights(config.model_path)
        self.model = model
        self.model.eval()
        self.mask = SubcarrierMask.from_file(config.mask_path) if config.mask_path else SubcarrierMask()
        self.stats = MonitorStats()
        self.records: list = []
        self._sink = sink
        self._stop = threading.Event()
        self._frames: queue.Queue = queue.Queue(maxsize=config.queue_size * config.hop)
        self._windows: queue.Queue = queue.Queue(maxsize=config.queue_size)
        self.error: Optional[BaseException] = None
        self._abandoned = threading.Event()

    # control -------------------------------------------------------------

    def stop(self) -> None:
        self._stop.set()

    @property
    def stopping(self) -> bool:
        return self._stop.is_set()

    def _put(self, q: queue.Queue, item) -> bool:
        """Blocking put that gives up only if a stop was requested and nobody drains the queue."""
        while True:
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                if self._stop.is_set() and self._abandoned.is_set():
                    return False

    # stages ----------------------------------------------------------------

    def _replay(self, stream) -> None:
        cfg = self.config
        t_wall = time.monotonic()
        t_first = None
        for frame in parse_pcap(stream, cfg.port, self.stats.parse):
            if self._stop.is_set():
                return
            if cfg.source == "file" and cfg.replay_rate > 0:
                if t_first is None:
                    t_first = frame.timestamp_us
                due = t_wall + (frame.timestamp_us - t_first) / 1e6 / cfg.replay_rate
                delay = due - time.monotonic()
                if delay > 0 and self._stop.wait(delay):
                    return
            self.stats.frames += 1
            if not self._put(self._frames, frame):
                return

    def _ingest(self) -> None:
        cfg = self.config
        try:
            if cfg.source == "file":
                self._replay(cfg.path)
            else:
                attempt = 0
                while not self._stop.is_set():
                    before = self.stats.frames
                    try:
                        if cfg.path == "-":
                            self._replay(sys.stdin.buffer)
                        else:
                            with open(cfg.path, "rb") as stream:
                                self._replay(stream)
                    except (OSError, PcapFormatError) as exc:
                        logger.warning("pipe source failed: %s", exc)
                    if self._stop.is_set() or cfg.path == "-":
                        break
                    attempt = 0 if self.stats.frames > before else attempt + 1
                    if attempt >= cfg.retry.max_reconnects:
                        logger.info("pipe source exhausted after %d reconnect attempts", attempt)
                        break
                    self.stats.reconnects += 1
                    self._stop.wait(cfg.retry.backoff(attempt + 1))
        except BaseException as exc:  # surfaced by run()
            self.error = exc
            self._stop.set()
        finally:
            self._put(self._frames, _END)

    def _window(self) -> None:
        cfg = self.config
        columns: collections.deque = collections.deque(maxlen=cfg.window)
        times: collections.deque = collections.deque(maxlen=cfg.window)
        since = 0
        while True:
            frame = self._frames.get()
            if frame is _END:
                break
            columns.append(amplitude_column(frame))
            times.append(frame.timestamp_us)
            since += 1
            if len(columns) == cfg.window and (self.stats.windows == 0 or since >= cfg.hop):
                since = 0
                w = Window(self.stats.windows, times[0], times[-1], np.stack(columns, axis=1))
                self.stats.windows += 1
                if not self._put(self._windows, w):
                    break
        self._put(self._windows, _END)

    def _classify(self, w: Window, tracker: AlarmTracker) -> dict:
        t0 = time.perf_counter_ns()
        image = preprocess(w.amplitudes, self.mask, self.config.ma_window)
        t1 = time.perf_counter_ns()
        out = self.model.forward_with_exit(to_model_input(image[None]))
        t2 = time.perf_counter_ns()
        record = {
            "ts": w.end_us / 1e6,
            "window_id": w.window_id,
            "rod_label": out.rod_label,
            "rod_probs": [round(float(p), 6) for p in out.rod_probs],
            "exited_early": out.exited_early,
            "latency_ns": t2 - t1,
            "preprocess_ns": t1 - t0,
        }
        if out.har_label is not None:
            record["har_label"] = out.har_label
            record["har_probs"] = [round(float(p), 6) for p in out.har_probs]
        event = tracker.update(out.rod_label, w.window_id, record["ts"], out.rod_probs)
        if event is not None:
            record["alarm"] = event.to_dict()
            self.stats.alarms += 1
            logger.warning("alarm %s at window %d", event.kind, event.window_id)
        if out.exited_early:
            self.stats.early_exits += 1
        return record

    # driver ------------------------------------------------------------------

    def run(self, install_signals: bool = True) -> MonitorStats:
        """Process the source to exhaustion (or until stopped); returns the final counters."""
        cfg = self.config
        previous = {}
        if install_signals and threading.current_thread() is threading.main_thread():
            for sig in (signal.SIGINT, signal.SIGTERM):
                previous[sig] = signal.signal(sig, lambda *_: self.stop())
        dispatcher = TelemetryDispatcher(cfg.endpoint, cfg.auth_token, cfg.retry, cfg.buffer_size,
                                         sink=self._emit).start()
        ingest = threading.Thread(target=self._ingest, name="ingest", daemon=True)
        window = threading.Thread(target=self._window, name="window", daemon=True)
        ingest.start()
        window.start()
        tracker = AlarmTracker(cfg.debounce)
        try:
            while True:
                try:
                    w = self._windows.get(timeout=0.1)
                except queue.Empty:
                    if self._stop.is_set() and not ingest.is_alive() and not window.is_alive():
                        break
                    if self._stop.is_set() and ingest.is_alive():
                        # a source blocked in open()/read() cannot see the stop flag
                        ingest.join(0.5)
                        if ingest.is_alive():
                            self._abandoned.set()
                            self._frames.put(_END)
                    continue
                if w is _END:
                    break
                dispatcher.submit(self._classify(w, tracker))
                self.stats.records += 1
        finally:
            self._abandoned.set()
            window.join(5.0)
            dispatcher.close()
            for sig, handler in previous.items():
                signal.signal(sig, handler)
        self.stats.delivered = dispatcher.delivered
        self.stats.dead_letter = dispatcher.dead_letter
        self.stats.dropped = dispatcher.dropped
        if self.error is not None:
            raise self.error
        return self.stats

    def _emit(self, record: dict) -> None:
        self.records.append(record)
        if self.config.output:
            with open(self.config.output, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if self._sink is not None:
            self._sink(record)


def run(config: MonitorConfig, model: Optional[BranchyGhostNet] = None,
        sink: Optional[Callable[[dict], None]] = None) -> MonitorStats:
    return Monitor(config, model, sink).run()
