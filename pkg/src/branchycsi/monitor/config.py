"""Monitor configuration, loaded from a JSON file."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..csi.pcap import NEXMON_PORT
from ..csi.preprocess import DEFAULT_MA_WINDOW, WINDOW
from ..errors import ConfigurationError
from .telemetry import RetryPolicy, check_endpoint

SOURCES = ("file", "pipe")


@dataclass(frozen=True)
class MonitorConfig:
    """Everything the daemon needs.

    ``source="file"`` replays a pcap capture, pacing frames by their capture
    timestamps divided by ``replay_rate`` (0 replays as fast as possible).
    ``source="pipe"`` reads a pcap stream from a FIFO (``path``) or stdin
    (``path="-"``) and reopens it after end-of-stream per ``retry``.
    Without an ``endpoint`` records are only logged and written to ``output``.
    """

    path: str
    model_path: Optional[str] = None
    source: str = "file"
    replay_rate: float = 1.0
    window: int = WINDOW
    hop: int = 100
    debounce: int = 3
    endpoint: Optional[str] = None
    auth_token: Optional[str] = None
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    buffer_size: int = 100
    queue_size: int = 4
    port: int = NEXMON_PORT
    ma_window: int = DEFAULT_MA_WINDOW
    mask_path: Optional[str] = None
    output: Optional[str] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigurationError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.hop < 1:
            raise ConfigurationError(f"hop must be >= 1, got {self.hop}")
        if self.debounce < 1:
            raise ConfigurationError(f"debounce must be >= 1, got {self.debounce}")
        if self.window < 1 or self.ma_window < 1:
            raise ConfigurationError("window and ma_window must be >= 1")
        if self.replay_rate < 0:
            raise ConfigurationError(f"replay_rate must be >= 0, got {self.replay_rate}")
        if self.buffer_size < 1 or self.queue_size < 1:
            raise ConfigurationError("buffer_size and queue_size must be >= 1")
        if not 0 <= self.port <= 0xFFFF:
            raise ConfigurationError(f"port {self.port} out of range")
        if self.endpoint:
            check_endpoint(self.endpoint)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "MonitorConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("monitor config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown monitor config keys: {sorted(unknown)}")
        if "path" not in raw:
            raise ConfigurationError("monitor config needs 'path'")
        raw = dict(raw)
        retry = raw.get("retry", {})
        if isinstance(retry, dict):
            try:
                raw["retry"] = RetryPolicy(**retry)
            except TypeError as exc:
                raise ConfigurationError(f"bad retry policy: {exc}") from None
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "MonitorConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(raw)


def window_count(n_frames: int, window: int, hop: int) -> int:
    """Number of complete sliding windows over ``n_frames`` frames."""
    return 0 if n_frames < window else (n_frames - window) // hop + 1
