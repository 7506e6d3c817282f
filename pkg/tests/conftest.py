from pathlib import Path

import numpy as np
import pytest

from branchycsi import kernels
from branchycsi.nn import build_branchy_ghostnet

# two bottlenecks, one on each side of the branch point; small enough for finite differences
TINY_STAGES = (((3, 8, 8, 0, 1),), ((3, 16, 12, 4, 2),))
TINY_OVERRIDES = dict(stages=TINY_STAGES, input_hw=(12, 16), stem_channels=8, final_channels=16,
                      head_hidden=12, early_hidden=10, early_expansion=2)


def build_tiny(seed=0, **kw):
    """Two-bottleneck network on 12 x 16 inputs."""
    return build_branchy_ghostnet(1.0, branch_point=1, seed=seed, strict=False, **{**TINY_OVERRIDES, **kw})


@pytest.fixture
def tiny_model():
    return build_tiny()


@pytest.fixture(params=kernels.available())
def backend(request):
    with kernels.using(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class StubEndpoint:
    """Local HTTP server recording JSON POSTs; ``script`` lists status codes to answer first."""

    def __init__(self, script=(), default=200):
        import http.server
        import json
        import threading

        self.received, self.attempts, self.auth = [], 0, []
        self.script, self.default = list(script), default
        lock = threading.Lock()
        stub = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                with lock:
                    stub.attempts += 1
                    code = stub.script.pop(0) if stub.script else stub.default
                    if 200 <= code < 300:
                        stub.received.append(json.loads(body))
                        stub.auth.append(self.headers.get("Authorization"))
                self.send_response(code)
                self.send_header("Content-Length", "0")
                self.end_headers()

            def log_message(self, *args):
                pass

        self.server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_address[1]}/telemetry"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_endpoint():
    stubs = []

    def make(script=(), default=200):
        stubs.append(StubEndpoint(script, default))
        return stubs[-1]

    yield make
    for s in stubs:
        s.close()


def unused_port():
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# acceptance report: tests/test_acceptance.py fills this; the summary hook prints it
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        ok, detail = ACCEPTANCE.get(n, (None, "not run"))
        status = "NOT RUN" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"[{status:>7}] criterion {n:>2}: {detail}")


SMOKE_CHECKPOINT = Path(__file__).resolve().parents[1] / "src" / "branchycsi" / "data" / "smoke.bgcn"
