import json
import os
import threading
import time

import numpy as np
import pytest

from branchycsi.csi import Scenario, synth_capture
from branchycsi.csi.pcap import write_pcap
from branchycsi.errors import ConfigurationError, ParameterError
from branchycsi.monitor import (
    AlarmTracker,
    Monitor,
    MonitorConfig,
    RetryPolicy,
    TelemetryBuffer,
    TelemetryDispatcher,
    alarm_decision,
    alarm_windows,
    post_telemetry,
    window_count,
)
from branchycsi.nn import build_branchy_ghostnet

from conftest import unused_port

FAST = RetryPolicy(max_attempts=3, initial_backoff=0.01, factor=2.0, max_backoff=0.05, timeout=1.0,
                   max_reconnects=2)


# alarm rules ---------------------------------------------------------------------


def test_alarm_decision_examples():
    e = alarm_decision([1, 1, 0, 0], 2)
    assert e is not None and e.kind == "room-empty" and e.window_id == 3
    assert alarm_decision([1, 1, 0], 2) is None
    assert [a.window_id for a in alarm_windows([0, 0, 0], 2)] == [1]
    assert alarm_windows([2, 1, 2, 1], 2) == []
    assert alarm_decision([2], 2) is None
    with pytest.raises(ParameterError):
        alarm_decision([], 2)


def test_alarms_refire_only_after_leaving():
    seq = [0, 0, 1, 0, 0, 1, 1, 0, 0, 2, 2, 2]
    events = alarm_windows(seq, 2)
    assert [(e.kind, e.window_id) for e in events] == [("room-empty", 1), ("room-empty", 8), ("contact-detected", 10)]


def test_debounce_one_fires_on_every_entry():
    assert [e.window_id for e in alarm_windows([0, 1, 0, 2, 2, 0], 1)] == [0, 2, 3, 5]


def test_events_equal_state_entries_property():
    rng = np.random.default_rng(0)
    for _ in range(200):
        seq = rng.integers(0, 3, rng.integers(1, 40)).tolist()
        d = int(rng.integers(1, 4))
        # reference: explicit debounced-state simulation
        state, run_label, run, entries = None, None, 0, []
        for i, lab in enumerate(seq):
            run = run + 1 if lab == run_label else 1
            run_label = lab
            if run >= d and lab != state:
                state = lab
                if lab in (0, 2):
                    entries.append(i)
        assert [e.window_id for e in alarm_windows(seq, d)] == entries


def test_tracker_validates_debounce():
    with pytest.raises(ParameterError):
        AlarmTracker(0)


# config ---------------------------------------------------------------------------


def test_config_validation(tmp_path):
    base = {"path": "x.pcap"}
    assert MonitorConfig.from_dict(base).hop == 100
    for bad in [{"hop": 0}, {"debounce": 0}, {"source": "socket"}, {"endpoint": "ftp://x"},
                {"retry": {"max_attempts": 0}}, {"unknown": 1}, {"replay_rate": -1}]:
        with pytest.raises(ConfigurationError):
            MonitorConfig.from_dict({**base, **bad})
    with pytest.raises(ConfigurationError):
        MonitorConfig.from_dict({})
    p = tmp_path / "m.json"
    p.write_text(json.dumps({**base, "retry": {"max_attempts": 2}}))
    assert MonitorConfig.from_file(p).retry.max_attempts == 2
    p.write_text("{nope")
    with pytest.raises(ConfigurationError):
        MonitorConfig.from_file(p)


def test_window_count():
    assert window_count(299, 300, 100) == 0
    assert window_count(300, 300, 100) == 1
    assert window_count(1200, 300, 100) == 10
    assert window_count(1250, 300, 100) == 10


# telemetry ------------------------------------------------------------------------


def test_post_delivered(stub_endpoint):
    stub = stub_endpoint()
    status = post_telemetry({"window_id": 1}, stub.url, "tok", FAST)
    assert status.delivered and status.attempts == 1 and status.status_code == 200
    assert stub.received == [{"window_id": 1}] and stub.auth == ["Bearer tok"]


def test_post_retries_after_500(stub_endpoint):
    stub = stub_endpoint(script=[500])
    status = post_telemetry({"window_id": 2}, stub.url, None, FAST)
    assert status.delivered and status.attempts == 2 and stub.attempts == 2 and stub.auth == [None]


def test_post_exhausts_retries(stub_endpoint):
    stub = stub_endpoint(default=503)
    sleeps = []
    status = post_telemetry({}, stub.url, None, FAST, sleep=sleeps.append)
    assert not status.delivered and status.attempts == 3 and status.error == "HTTP 503"
    assert sleeps == [0.01, 0.02]


def test_post_unreachable_and_bad_url():
    status = post_telemetry({}, f"http://127.0.0.1:{unused_port()}/", None, FAST, sleep=lambda s: None)
    assert not status.delivered and "Error" in status.error
    with pytest.raises(ConfigurationError):
        post_telemetry({}, "not a url")


def test_backoff_is_capped():
    p = RetryPolicy(initial_backoff=1.0, factor=3.0, max_backoff=5.0)
    assert [p.backoff(i) for i in (1, 2, 3)] == [1.0, 3.0, 5.0]


def test_buffer_drops_oldest():
    buf = TelemetryBuffer(3)
    for i in range(5):
        buf.push({"i": i})
    assert buf.dropped == 2 and [buf.pop(0)["i"] for _ in range(3)] == [2, 3, 4]
    assert buf.pop(0.01) is None


def test_dispatcher_unreachable_endpoint_drops_with_counter():
    retry = RetryPolicy(max_attempts=2, initial_backoff=0.2, timeout=0.2)
    d = TelemetryDispatcher(f"http://127.0.0.1:{unused_port()}/", None, retry, capacity=100).start()
    for i in range(250):
        d.submit({"window_id": i})
    d.close(timeout=0.5)
    assert d.dropped >= 150 - 1
    assert d.delivered == 0 and d.delivered + d.dead_letter + d.dropped == 250


def test_dispatcher_delivers_in_order(stub_endpoint):
    stub = stub_endpoint(script=[500, 200, 500])
    d = TelemetryDispatcher(stub.url, "t", FAST, capacity=100).start()
    for i in range(20):
        d.submit({"window_id": i})
    d.close()
    assert d.delivered == 20 and [r["window_id"] for r in stub.received] == list(range(20))


# daemon -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def capture(tmp_path_factory):
    path = tmp_path_factory.mktemp("cap") / "scripted.pcap"
    write_pcap(synth_capture([(Scenario(1, 0), 500), (Scenario(0), 500)], seed=4), path)
    return path


@pytest.fixture(scope="module")
def small_model():
    return build_branchy_ghostnet(0.25, strict=False, seed=0)


def test_daemon_one_record_per_window(capture, small_model, stub_endpoint, tmp_path):
    stub = stub_endpoint(script=[500])
    out = tmp_path / "records.jsonl"
    cfg = MonitorConfig(path=str(capture), replay_rate=0, debounce=2, endpoint=stub.url, auth_token="k",
                        retry=FAST, output=str(out))
    stats = Monitor(cfg, small_model).run(install_signals=False)
    n = window_count(1000, 300, 100)
    assert stats.frames == 1000 and stats.windows == stats.records == n == 8
    assert stats.delivered == n and stats.lost == 0 and stats.dropped == 0
    ids = [r["window_id"] for r in stub.received]
    assert ids == list(range(n))
    rod = [r["rod_label"] for r in stub.received]
    fired = [r["window_id"] for r in stub.received if "alarm" in r]
    assert fired == [e.window_id for e in alarm_windows(rod, 2)]
    for r in stub.received:
        assert {"ts", "window_id", "rod_label", "rod_probs", "exited_early", "latency_ns"} <= set(r)
        assert ("har_label" in r) == (not r["exited_early"]) and len(r["rod_probs"]) == 3
    assert [json.loads(line)["window_id"] for line in out.read_text().splitlines()] == ids


def test_daemon_replay_pacing(capture, small_model):
    cfg = MonitorConfig(path=str(capture), replay_rate=20.0)  # 10 s of capture at 20x
    t0 = time.monotonic()
    Monitor(cfg, small_model).run(install_signals=False)
    assert time.monotonic() - t0 >= 0.45


def test_daemon_stop_drains(capture, small_model):
    cfg = MonitorConfig(path=str(capture), replay_rate=5.0)
    mon = Monitor(cfg, small_model)
    threading.Timer(0.9, mon.stop).start()
    stats = mon.run(install_signals=False)
    assert stats.frames < 1000 and stats.records == stats.windows and stats.lost == 0


def test_daemon_missing_file_raises(small_model, tmp_path):
    with pytest.raises(FileNotFoundError):
        Monitor(MonitorConfig(path=str(tmp_path / "none.pcap"), replay_rate=0), small_model).run(install_signals=False)


@pytest.mark.skipif(not hasattr(os, "mkfifo"), reason="needs named pipes")
def test_daemon_pipe_reconnects(capture, small_model, tmp_path):
    fifo = tmp_path / "csi.fifo"
    os.mkfifo(fifo)
    blob = capture.read_bytes()

    def writer():
        for _ in range(2):
            with open(fifo, "wb") as f:
                f.write(blob)
            time.sleep(0.05)

    threading.Thread(target=writer, daemon=True).start()
    cfg = MonitorConfig(path=str(fifo), source="pipe", retry=RetryPolicy(initial_backoff=0.01, max_reconnects=1))
    mon = Monitor(cfg, small_model)
    # the reader blocks opening the FIFO once the writer is gone; stop after both sessions
    threading.Timer(3.0, mon.stop).start()
    stats = mon.run(install_signals=False)
    assert stats.frames == 2000 and stats.reconnects >= 1 and stats.records == stats.windows
