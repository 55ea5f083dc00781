"""Backend conformance suite: the publish/latest/call contract as data.

Every backend must pass the same checks; the report is a list of
(property, passed, detail) entries rather than exceptions so the suite can
run to completion and show the full picture per transport.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .. import schema as sc
from ..clock import now_ns
from ..errors import Empty, Timeout
from ..reqqueue import CommandRequest, next_request_id
from .base import Backend


@dataclass
class ConformanceReport:
    backend: str
    entries: list[tuple[str, bool, str]] = field(default_factory=list)

    def record(self, name: str, passed: bool, detail: str = ""):
        self.entries.append((name, passed, detail))

    @property
    def all_passed(self) -> bool:
        return all(passed for _, passed, _ in self.entries)

    def failures(self) -> list[str]:
        return [f"{name}: {detail}" for name, passed, detail in self.entries if not passed]


def _unique(prefix: str) -> str:
    return f"{prefix}-{next_request_id():x}"


def _check(report: ConformanceReport, name: str, fn):
    try:
        fn()
        report.record(name, True)
    except Exception as exc:  # report, don't abort the suite
        report.record(name, False, f"{type(exc).__name__}: {exc}")


def run_conformance(backend: Backend) -> ConformanceReport:
    report = ConformanceReport(backend.kind.kind)
    _check(report, "publish_then_latest", lambda: _publish_then_latest(backend))
    _check(report, "latest_before_publish_is_empty", lambda: _latest_empty(backend))
    _check(report, "latest_wins_after_many_publishes", lambda: _latest_wins(backend))
    _check(report, "echo_call_roundtrip", lambda: _echo_call(backend))
    _check(report, "call_timeout_without_replier", lambda: _call_timeout(backend))
    _check(report, "remote_error_is_reported", lambda: _remote_error(backend))
    _check(report, "interleaved_calls_match_ids", lambda: _interleaved_calls(backend))
    return report


def _publish_then_latest(backend: Backend):
    topic = _unique("conf/pub")
    desc = sc.infer_schema({"x": 0.0})
    pub = backend.publisher(topic, desc)
    sub = backend.subscriber(topic, desc)
    pub.publish(5, {"x": 1.5})
    ts, payload = sub.latest()
    assert ts == 5 and payload["x"] == 1.5, (ts, payload)


def _latest_empty(backend: Backend):
    topic = _unique("conf/empty")
    desc = sc.infer_schema({"x": 0.0})
    backend.publisher(topic, desc)
    sub = backend.subscriber(topic, desc)
    try:
        sub.latest()
    except Empty:
        return
    raise AssertionError("latest before any publish must raise Empty")


def _latest_wins(backend: Backend):
    topic = _unique("conf/stream")
    desc = sc.infer_schema({"seq": 0, "blob": np.zeros(256, np.uint8)})
    pub = backend.publisher(topic, desc)
    sub = backend.subscriber(topic, desc)
    n = 200
    for i in range(1, n + 1):
        pub.publish(i, {"seq": i, "blob": np.full(256, i % 256, np.uint8)})
    deadline = time.monotonic() + 5.0
    while time.monotonic() < deadline:
        ts, payload = sub.latest()
        if ts == n:
            assert payload["seq"] == n
            assert bool((payload["blob"] == n % 256).all())
            return
        time.sleep(0.005)
    raise AssertionError(f"subscriber never saw the final sample (saw ts={ts})")


def _serve_echo(backend: Backend, topic: str, desc, stop: threading.Event,
                fail_method: str = ""):
    replier = backend.replier(topic, desc, desc)

    def loop():
        while not stop.is_set():
            for request in replier.drain(timeout_s=0.02):
                if fail_method and request.method == fail_method:
                    replier.reply(request, error=f"handler rejected {request.method}")
                else:
                    replier.reply(request, payload=request.args)

    thread = threading.Thread(target=loop, daemon=True)
    thread.start()
    return thread


def _echo_call(backend: Backend):
    topic = _unique("conf/echo")
    desc = sc.infer_schema({"x": 0.0})
    stop = threading.Event()
    thread = _serve_echo(backend, topic, desc, stop)
    try:
        requester = backend.requester(topic, desc, desc)
        request = CommandRequest(id=next_request_id(), ts=now_ns(),
                                 method="echo", args={"x": 1.0})
        reply = requester.call(request, timeout_ms=2000)
        assert reply.ok and reply.id == request.id, reply
        assert reply.payload["x"] == 1.0
    finally:
        stop.set()
        thread.join(timeout=2)


def _call_timeout(backend: Backend):
    topic = _unique("conf/noreplier")
    desc = sc.infer_schema({"x": 0.0})
    # a queue must exist for transports that back calls with one
    if backend.kind.kind == "shm":
        backend.replier(topic, desc, desc)  # queue exists but nobody drains
    requester = backend.requester(topic, desc, desc)
    started = time.monotonic()
    try:
        requester.call(CommandRequest(id=next_request_id(), ts=now_ns(),
                                      method="echo", args={"x": 0.0}), timeout_ms=50)
    except Timeout:
        elapsed_ms = (time.monotonic() - started) * 1e3
        assert elapsed_ms >= 50, f"timed out too early ({elapsed_ms:.1f} ms)"
        return
    raise AssertionError("call without replier must raise Timeout")


def _remote_error(backend: Backend):
    topic = _unique("conf/err")
    desc = sc.infer_schema({"x": 0.0})
    stop = threading.Event()
    thread = _serve_echo(backend, topic, desc, stop, fail_method="boom")
    try:
        requester = backend.requester(topic, desc, desc)
        reply = requester.call_method("boom", {"x": 0.0}, timeout_ms=2000)
        assert not reply.ok and "boom" in reply.error, reply
    finally:
        stop.set()
        thread.join(timeout=2)


def _interleaved_calls(backend: Backend):
    topic = _unique("conf/interleave")
    desc = sc.infer_schema({"x": 0.0})
    stop = threading.Event()
    thread = _serve_echo(backend, topic, desc, stop)
    mismatches: list[str] = []

    def requester_worker(worker: int):
        requester = backend.requester(topic, desc, desc)
        for i in range(25):
            value = float(worker * 1000 + i)
            reply = requester.call_method("echo", {"x": value}, timeout_ms=5000)
            if not reply.ok or reply.payload["x"] != value:
                mismatches.append(f"worker {worker} call {i}: {reply}")

    try:
        workers = [threading.Thread(target=requester_worker, args=(w,)) for w in range(4)]
        for w in workers:
            w.start()
        for w in workers:
            w.join(timeout=30)
        assert not mismatches, mismatches[:3]
    finally:
        stop.set()
        thread.join(timeout=2)
