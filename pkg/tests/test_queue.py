"""Request queue FIFO semantics and back-pressure."""

import threading

import pytest

from rio import schema as sc
from rio.errors import QueueFull, SchemaMismatch
from rio.reqqueue import CommandRequest, RequestQueue, next_request_id


def make_queue(capacity=8):
    desc = sc.infer_schema({"value": 0.0})
    return RequestQueue.local(desc, capacity=capacity)


def req(req_id, value=0.0, method="set"):
    return CommandRequest(id=req_id, ts=req_id, method=method, args={"value": value})


def test_fifo_order():
    q = make_queue()
    q.put(req(1))
    q.put(req(2))
    drained = q.drain()
    assert [r.id for r in drained] == [1, 2]
    assert len(q) == 0


def test_drain_empty_returns_nothing():
    q = make_queue()
    assert q.drain() == []


def test_queue_full_backpressure():
    q = make_queue(capacity=2)
    q.put(req(1))
    q.put(req(2))
    with pytest.raises(QueueFull):
        q.put(req(3))
    q.drain()
    q.put(req(4))  # space reclaimed after drain


def test_payload_schema_enforced():
    q = make_queue()
    with pytest.raises(SchemaMismatch):
        q.put(CommandRequest(id=1, ts=1, method="set", args={"wrong": 1.0}))


def test_method_and_args_roundtrip():
    q = make_queue()
    q.put(CommandRequest(id=9, ts=100, method="set_joint_target", args={"value": -2.5}))
    r = q.drain()[0]
    assert (r.id, r.ts, r.method, r.args["value"]) == (9, 100, "set_joint_target", -2.5)


def test_empty_method_rejected():
    with pytest.raises(ValueError):
        CommandRequest(id=1, ts=1, method="", args={})


def test_concurrent_producers_preserve_admission_order():
    q = make_queue(capacity=4096)
    per_producer = 200
    admitted = []
    lock = threading.Lock()

    def producer(base):
        for i in range(per_producer):
            r = req(base + i)
            q.put(r)  # admission seq assigned under the queue lock
            with lock:
                admitted.append(r.id)

    threads = [threading.Thread(target=producer, args=(1000 * p,)) for p in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    drained = [r.id for r in q.drain()]
    assert len(drained) == 4 * per_producer
    # FIFO within each producer (admission order is the queue's own counter;
    # the interleaving across producers is whatever admission produced)
    for p in range(4):
        ids = [i for i in drained if 1000 * p <= i < 1000 * (p + 1)]
        assert ids == sorted(ids)


def test_request_ids_unique():
    ids = {next_request_id() for _ in range(10_000)}
    assert len(ids) == 10_000
