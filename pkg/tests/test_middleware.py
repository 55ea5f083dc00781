"""Backend conformance and transport-specific contracts."""

import multiprocessing as mp
import time

import numpy as np
import pytest

from rio import schema as sc
from rio.errors import AddressInUse, Empty, ShmNamespaceCollision, Timeout
from rio.middleware import BackendKind, open_backend
from rio.middleware.conformance import run_conformance

from conftest import make_kind


def test_conformance_suite_passes(backend):
    report = run_conformance(backend)
    assert report.all_passed, report.failures()


def test_publish_then_latest_roundtrip(backend):
    desc = sc.infer_schema({"x": 0.0})
    pub = backend.publisher("mw/basic", desc)
    sub = backend.subscriber("mw/basic", desc)
    pub.publish(5, {"x": 2.5})
    deadline = time.monotonic() + 2.0
    while True:
        try:
            ts, payload = sub.latest()
            break
        except Empty:
            assert time.monotonic() < deadline
    assert ts == 5 and payload["x"] == 2.5


def test_latest_before_any_publish_is_empty(backend):
    desc = sc.infer_schema({"x": 0.0})
    backend.publisher("mw/none", desc)
    sub = backend.subscriber("mw/none", desc)
    with pytest.raises(Empty):
        sub.latest()


def test_call_timeout_without_replier_takes_at_least_deadline(backend):
    desc = sc.infer_schema({"x": 0.0})
    if backend.kind.kind == "shm":
        backend.replier("mw/lonely", desc, desc)
    requester = backend.requester("mw/lonely", desc, desc)
    start = time.monotonic()
    with pytest.raises(Timeout):
        requester.call_method("ping", {"x": 0.0}, timeout_ms=50)
    assert (time.monotonic() - start) >= 0.05


def _child_read_bytes(kind, topic, schema_json, out):
    from rio import schema as sc_child
    from rio.middleware import open_backend as ob
    desc = sc_child.SchemaDescriptor.from_json(schema_json)
    be = ob(kind)
    try:
        sub = be.subscriber(topic, desc, timeout_s=10.0)
        deadline = time.monotonic() + 10.0
        while time.monotonic() < deadline:
            try:
                ts, payload = sub.latest()
                out.put((ts, payload["blob"].tobytes()))
                return
            except Empty:
                time.sleep(0.005)
        out.put(None)
    finally:
        be.close()


@pytest.mark.parametrize("kind_name", ["shm", "tcp"])
def test_cross_process_publish_bytes_identical(kind_name):
    """2048-byte payload published here is byte-identical in another process."""
    kind = make_kind(kind_name)
    be = open_backend(kind)
    try:
        desc = sc.infer_schema({"blob": np.zeros(2048, np.uint8)})
        pub = be.publisher("xproc/stream", desc)
        blob = np.frombuffer(bytes(range(256)) * 8, dtype=np.uint8).copy()
        pub.publish(7, {"blob": blob})
        ctx = mp.get_context("fork")
        out = ctx.Queue()
        child = ctx.Process(target=_child_read_bytes,
                            args=(be.attachable(), "xproc/stream", desc.to_json(), out))
        child.start()
        result = out.get(timeout=15)
        child.join(timeout=5)
        assert result is not None, "child never saw the sample"
        ts, raw = result
        assert ts == 7
        assert raw == blob.tobytes()
    finally:
        be.close()


def test_tcp_occupied_port_raises_address_in_use():
    first = open_backend(make_kind("tcp"))
    try:
        with pytest.raises(AddressInUse):
            open_backend(BackendKind("tcp", {"host": "127.0.0.1", "port": first.port}))
    finally:
        first.close()


def test_shm_topic_collision_and_cleanup():
    kind = make_kind("shm")
    desc = sc.infer_schema({"x": 0.0})
    be = open_backend(kind)
    be.publisher("dup/topic", desc)
    other = open_backend(kind)
    try:
        with pytest.raises(ShmNamespaceCollision):
            other.publisher("dup/topic", desc)
    finally:
        other.close()
    be.close()
    # after close the namespace is clean: same topic can be created again
    again = open_backend(kind)
    try:
        again.publisher("dup/topic", desc)
    finally:
        again.close()


def test_shm_publish_does_not_allocate_sample_buffers():
    """Zero-copy path: slot writes only, no per-publish sample allocation."""
    kind = make_kind("shm")
    be = open_backend(kind)
    try:
        desc = sc.infer_schema({"blob": np.zeros(2048, np.uint8)})
        pub = be.publisher("alloc/probe", desc)
        payload = {"blob": np.ones(2048, np.uint8)}
        for i in range(1, 11):  # warm-up
            pub.publish(i, payload)
        before = sc.ENCODE_ALLOCS
        for i in range(11, 211):
            pub.publish(i, payload)
        assert sc.ENCODE_ALLOCS == before
    finally:
        be.close()


def test_reply_ids_never_duplicated_within_connection(backend):
    import threading
    desc = sc.infer_schema({"x": 0.0})
    replier = backend.replier("mw/ids", desc, desc)
    stop = threading.Event()

    def serve():
        while not stop.is_set():
            for request in replier.drain(timeout_s=0.02):
                replier.reply(request, payload=request.args)

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    try:
        requester = backend.requester("mw/ids", desc, desc)
        seen = set()
        for i in range(50):
            reply = requester.call_method("echo", {"x": float(i)}, timeout_ms=2000)
            assert reply.ok
            assert reply.id not in seen
            seen.add(reply.id)
    finally:
        stop.set()
        thread.join(timeout=2)
