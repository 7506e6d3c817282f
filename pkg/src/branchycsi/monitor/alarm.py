"""Debounced, edge-triggered occupancy alarms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..errors import ParameterError

ALARM_KINDS = {0: "room-empty", 2: "contact-detected"}


@dataclass(frozen=True)
class AlarmEvent:
    kind: str
    window_id: int
    timestamp: float = 0.0
    rod_probs: tuple = field(default=())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "window_id": self.window_id}


class AlarmTracker:
    """Debounced occupancy state; an alarm fires when that state enters 0 or 2.

    The debounced label changes only after ``debounce`` consecutive windows
    agree on a new label. Staying in an alarm state never re-fires; leaving it
    (debounced) and coming back does.
    """

    def __init__(self, debounce: int = 3) -> None:
        if debounce < 1:
            raise ParameterError(f"debounce must be >= 1, got {debounce}")
        self.debounce = debounce
        self.state: Optional[int] = None
        self._run_label: Optional[int] = None
        self._run_length = 0

    def update(self, rod_label: int, window_id: int = 0, timestamp: float = 0.0,
               rod_probs: Sequence[float] = ()) -> Optional[AlarmEvent]:
        if rod_label == self._run_label:
            self._run_length += 1
        else:
            self._run_label, self._run_length = rod_label, 1
        if self._run_length < self.debounce or rod_label == self.state:
            return None
        self.state = rod_label
        kind = ALARM_KINDS.get(rod_label)
        if kind is None:
            return None
        return AlarmEvent(kind, window_id, timestamp, tuple(float(p) for p in rod_probs))


def alarm_decision(history: Sequence[int], debounce: int) -> Optional[AlarmEvent]:
    """Alarm raised by the last window of ``history``, if any."""
    if not history:
        raise ParameterError("alarm history is empty")
    tracker = AlarmTracker(debounce)
    event = None
    for i, label in enumerate(history):
        event = tracker.update(label, window_id=i)
    return event


def alarm_windows(history: Sequence[int], debounce: int) -> list[AlarmEvent]:
    """All alarms a label sequence raises, in order."""
    tracker = AlarmTracker(debounce)
    return [e for i, label in enumerate(history) if (e := tracker.update(label, window_id=i)) is not None]
