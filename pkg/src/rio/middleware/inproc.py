"""In-process backend: every endpoint shares one address space.

Running all nodes as threads in a single process keeps stack traces,
breakpoints, and exception handling simple, which is the point of this
backend; the storage structures are the same ring buffers and request
queues the other transports use.
"""

from __future__ import annotations

import threading
from typing import Any, Mapping

from .. import schema as sc
from ..clock import now_ns
from ..errors import Disconnected, Empty, SchemaMismatch, Timeout
from ..reqqueue import CommandReply, CommandRequest, RequestQueue
from ..ring import RingBuffer
from . import base


class _Topic:
    def __init__(self):
        self.ring: RingBuffer | None = None
        self.queue: RequestQueue | None = None
        self.rep_schema: sc.SchemaDescriptor | None = None
        self.replier_alive = False
        self.pending: dict[int, "_ReplyBox"] = {}
        self.lock = threading.Lock()


class _ReplyBox:
    def __init__(self):
        self.event = threading.Event()
        self.reply: CommandReply | None = None


class InprocBackend(base.Backend):
    def __init__(self, kind: base.BackendKind):
        self.kind = kind
        self._topics: dict[str, _Topic] = {}
        self._lock = threading.Lock()
        self._closed = False

    def _topic(self, topic: str) -> _Topic:
        with self._lock:
            if self._closed:
                raise Disconnected("backend closed")
            return self._topics.setdefault(topic, _Topic())

    def publisher(self, topic, schema, capacity=128):
        state = self._topic(topic)
        with state.lock:
            if state.ring is None:
                state.ring = RingBuffer.local(schema, capacity)
            elif state.ring.schema != schema:
                raise SchemaMismatch(f"topic {topic!r} already has a different schema")
        return _InprocPublisher(topic, schema, state)

    def subscriber(self, topic, schema, timeout_s=5.0):
        state = self._topic(topic)
        with state.lock:
            if state.ring is None:
                state.ring = RingBuffer.local(schema, 128)
            elif state.ring.schema != schema:
                raise SchemaMismatch(f"topic {topic!r} already has a different schema")
        return _InprocSubscriber(topic, schema, state)

    def requester(self, topic, req_schema, rep_schema):
        state = self._topic(topic)
        with state.lock:
            if state.queue is None:
                state.queue = RequestQueue.local(req_schema)
                state.rep_schema = rep_schema
        return _InprocRequester(topic, state)

    def replier(self, topic, req_schema, rep_schema, capacity=64):
        state = self._topic(topic)
        with state.lock:
            if state.queue is None or state.queue.schema != req_schema:
                state.queue = RequestQueue.local(req_schema, capacity=capacity)
            state.rep_schema = rep_schema
            state.replier_alive = True
        return _InprocReplier(topic, state)

    def close(self):
        with self._lock:
            self._closed = True
            topics = list(self._topics.values())
            self._topics.clear()
        for state in topics:
            with state.lock:
                state.replier_alive = False
                for box in state.pending.values():
                    box.reply = CommandReply(id=0, ts=now_ns(), ok=False, error="backend closed")
                    box.event.set()
                state.pending.clear()


class _InprocPublisher(base.Publisher):
    def __init__(self, topic, schema, state):
        self.topic, self.schema, self._state = topic, schema, state

    def publish(self, ts_ns: int, payload: Mapping[str, Any]) -> None:
        self._state.ring.put(ts_ns, payload)

    def close(self):
        pass


class _InprocSubscriber(base.Subscriber):
    def __init__(self, topic, schema, state):
        self.topic, self.schema, self._state = topic, schema, state

    def latest(self):
        return self._state.ring.latest()

    def last_k(self, k):
        return self._state.ring.last_k(k)

    def nearest(self, ts_ns):
        return self._state.ring.nearest(ts_ns)

    def close(self):
        pass


class _InprocRequester(base.Requester):
    def __init__(self, topic, state):
        self.topic, self._state = topic, state

    def call(self, request: CommandRequest, timeout_ms: float) -> CommandReply:
        box = _ReplyBox()
        with self._state.lock:
            self._state.pending[request.id] = box
        try:
            self._state.queue.put(request)
            if not box.event.wait(timeout_ms / 1e3):
                raise Timeout(f"no reply to {request.method!r} within {timeout_ms} ms")
            reply = box.reply
            if reply.id == 0 and not reply.ok:
                raise Disconnected(reply.error)
            return reply
        finally:
            with self._state.lock:
                self._state.pending.pop(request.id, None)

    def close(self):
        pass


class _InprocReplier(base.Replier):
    def __init__(self, topic, state):
        self.topic, self._state = topic, state

    def drain(self, timeout_s: float = 0.0):
        deadline = now_ns() + int(timeout_s * 1e9)
        while True:
            requests = self._state.queue.drain()
            if requests or now_ns() >= deadline:
                return requests
            threading.Event().wait(0.0005)

    def reply(self, request, payload=None, error=""):
        if error:
            rep = CommandReply(id=request.id, ts=now_ns(), ok=False,
                               error=base.clip_error(error))
        else:
            payload = sc.conform(self._state.rep_schema, payload or {})
            rep = CommandReply(id=request.id, ts=now_ns(), ok=True, payload=payload)
        with self._state.lock:
            box = self._state.pending.get(request.id)
            if box is not None and box.reply is None:  # at-most-once
                box.reply = rep
                box.event.set()

    def close(self):
        with self._state.lock:
            self._state.replier_alive = False
