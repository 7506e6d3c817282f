from .alarm import ALARM_KINDS, AlarmEvent, AlarmTracker, alarm_decision, alarm_windows
from .config import MonitorConfig, window_count
from .daemon import Monitor, MonitorStats, run
from .telemetry import DeliveryStatus, RetryPolicy, TelemetryBuffer, TelemetryDispatcher, post_telemetry
