"""Shared-memory backend: zero-copy cross-process pub/sub and RPC.

Each topic owns named shared-memory segments: one ring buffer for the state
stream, one request queue, and one small reply mailbox per requester. The
publisher writes samples straight into the mapped slot, so after warm-up a
publish performs no allocation proportional to the payload.

Queue admission across processes is serialized with an ``flock`` file lock
(one lock file per queue under the namespace directory), which needs no
inherited process state: any process that can name the topic can join.
"""

from __future__ import annotations

import os
import tempfile
import threading
import time
from multiprocessing import resource_tracker, shared_memory
from typing import Any, Mapping

import fcntl

from .. import schema as sc
from ..clock import now_ns
from ..errors import Disconnected, ShmNamespaceCollision, Timeout
from ..reqqueue import CommandReply, CommandRequest, RequestQueue
from ..ring import RingBuffer
from . import base

ENV_NAMESPACE = "RIO_SHM_NAMESPACE"
DEFAULT_NAMESPACE = "rio"


def _segment_name(namespace: str, topic: str, suffix: str) -> str:
    safe_topic = topic.replace("/", ".")
    return f"rio.{namespace}.{safe_topic}.{suffix}"


def _lock_dir(namespace: str) -> str:
    path = os.path.join(tempfile.gettempdir(), f"rio-shm-{namespace}")
    os.makedirs(path, exist_ok=True)
    return path


def _attach(name: str, timeout_s: float):
    """Attach to an existing segment, polling until the creator maps it."""
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            seg = shared_memory.SharedMemory(name=name, create=False)
            # The creator's resource tracker owns cleanup; without this the
            # attaching process would try to unlink the segment again at exit.
            resource_tracker.unregister(seg._name, "shared_memory")  # noqa: SLF001
            return seg
        except FileNotFoundError:
            if time.monotonic() >= deadline:
                raise Disconnected(f"shared-memory segment {name!r} never appeared")
            time.sleep(0.002)


def _create(name: str, size: int):
    try:
        return shared_memory.SharedMemory(name=name, create=True, size=size)
    except FileExistsError:
        raise ShmNamespaceCollision(
            f"segment {name!r} already exists (another station on this namespace, "
            f"or a leaked segment from an unclean shutdown)")


class FlockLock:
    """Cross-process mutex backed by flock on a named file."""

    def __init__(self, path: str):
        self._fd = os.open(path, os.O_CREAT | os.O_RDWR, 0o600)

    def __enter__(self):
        fcntl.flock(self._fd, fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        fcntl.flock(self._fd, fcntl.LOCK_UN)
        return False

    def close(self):
        try:
            os.close(self._fd)
        except OSError:
            pass


class ShmBackend(base.Backend):
    def __init__(self, kind: base.BackendKind):
        self.kind = kind
        self.namespace = os.environ.get(ENV_NAMESPACE) or kind.get("namespace", DEFAULT_NAMESPACE)
        self._created: list[shared_memory.SharedMemory] = []
        self._attached: list[shared_memory.SharedMemory] = []
        self._locks: list[FlockLock] = []
        self._lock = threading.Lock()
        self._closed = False

    def _register(self, seg, created: bool):
        with self._lock:
            (self._created if created else self._attached).append(seg)
        return seg

    def publisher(self, topic, schema, capacity=128):
        name = _segment_name(self.namespace, topic, "ring")
        seg = self._register(_create(name, RingBuffer.required_bytes(schema, capacity)), True)
        ring = RingBuffer(seg.buf, schema, capacity, create=True)
        return _ShmPublisher(topic, schema, ring)

    def subscriber(self, topic, schema, timeout_s=5.0):
        name = _segment_name(self.namespace, topic, "ring")
        seg = self._register(_attach(name, timeout_s), False)
        ring = RingBuffer(seg.buf, schema, self._ring_capacity(seg, schema), create=False)
        return _ShmSubscriber(topic, schema, ring)

    @staticmethod
    def _ring_capacity(seg, schema) -> int:
        import struct
        (cap,) = struct.unpack_from("<Q", seg.buf, 24)
        return cap

    def requester(self, topic, req_schema, rep_schema):
        queue_name = _segment_name(self.namespace, topic, "queue")
        seg = self._register(_attach(queue_name, 5.0), False)
        lock = FlockLock(os.path.join(_lock_dir(self.namespace),
                                      topic.replace("/", ".") + ".lock"))
        self._locks.append(lock)
        queue = RequestQueue(seg.buf, req_schema, self._queue_capacity(seg), lock=lock,
                             create=False)
        nonce = int.from_bytes(os.urandom(6), "little")
        mailbox_schema = base.reply_envelope_schema(rep_schema)
        mb_name = _segment_name(self.namespace, topic, f"rep.{nonce:012x}")
        mb_seg = self._register(_create(mb_name, RingBuffer.required_bytes(mailbox_schema, 16)), True)
        mailbox = RingBuffer(mb_seg.buf, mailbox_schema, 16, create=True)
        return _ShmRequester(topic, queue, rep_schema, nonce, mailbox)

    def replier(self, topic, req_schema, rep_schema, capacity=64):
        queue_name = _segment_name(self.namespace, topic, "queue")
        seg = self._register(_create(queue_name, RequestQueue.required_bytes(req_schema, capacity)), True)
        lock = FlockLock(os.path.join(_lock_dir(self.namespace),
                                      topic.replace("/", ".") + ".lock"))
        self._locks.append(lock)
        queue = RequestQueue(seg.buf, req_schema, capacity, lock=lock, create=True)
        return _ShmReplier(self, topic, queue, rep_schema)

    @staticmethod
    def _queue_capacity(seg) -> int:
        import struct
        (cap,) = struct.unpack_from("<Q", seg.buf, 24)
        return cap

    def _attach_mailbox(self, topic: str, nonce: int, rep_schema) -> RingBuffer:
        mailbox_schema = base.reply_envelope_schema(rep_schema)
        name = _segment_name(self.namespace, topic, f"rep.{nonce:012x}")
        seg = self._register(_attach(name, 2.0), False)
        return RingBuffer(seg.buf, mailbox_schema, 16, create=False)

    def close(self):
        with self._lock:
            if self._closed:
                return
            self._closed = True
            created, attached = self._created, self._attached
            locks = self._locks
            self._created, self._attached, self._locks = [], [], []
        for seg in attached:
            try:
                seg.close()
            except (OSError, BufferError):
                pass
        for seg in created:
            try:
                seg.close()
                seg.unlink()
            except (OSError, FileNotFoundError, BufferError):
                pass
        for lock in locks:
            lock.close()


class _ShmPublisher(base.Publisher):
    def __init__(self, topic, schema, ring):
        self.topic, self.schema, self._ring = topic, schema, ring

    def publish(self, ts_ns: int, payload: Mapping[str, Any]) -> None:
        self._ring.put(ts_ns, payload)  # writes directly into the shared slot

    def close(self):
        pass


class _ShmSubscriber(base.Subscriber):
    def __init__(self, topic, schema, ring):
        self.topic, self.schema, self._ring = topic, schema, ring

    def latest(self):
        return self._ring.latest()

    def last_k(self, k):
        return self._ring.last_k(k)

    def nearest(self, ts_ns):
        return self._ring.nearest(ts_ns)

    def close(self):
        pass


class _ShmRequester(base.Requester):
    POLL_S = 0.0002

    def __init__(self, topic, queue, rep_schema, nonce, mailbox):
        self.topic = topic
        self._queue = queue
        self._rep_schema = rep_schema
        self._nonce = nonce
        self._mailbox = mailbox

    def call(self, request: CommandRequest, timeout_ms: float) -> CommandReply:
        request.meta = self._nonce
        seen = self._mailbox.put_count
        self._queue.put(request)
        deadline = time.monotonic() + timeout_ms / 1e3
        while True:
            count = self._mailbox.put_count
            if count > seen:
                fresh = self._mailbox.last_k(min(count - seen, self._mailbox.capacity))
                seen = count
                for _, env in fresh:
                    if env["id"] != request.id:
                        continue  # stale reply to an abandoned request: drop
                    if env["ok"]:
                        payload = sc.decode_payload(self._rep_schema, env["body"])
                        return CommandReply(id=request.id, ts=now_ns(), ok=True, payload=payload)
                    return CommandReply(id=request.id, ts=now_ns(), ok=False, error=env["error"])
            if time.monotonic() >= deadline:
                raise Timeout(f"no reply to {request.method!r} within {timeout_ms} ms")
            time.sleep(self.POLL_S)

    def close(self):
        pass


class _ShmReplier(base.Replier):
    POLL_S = 0.0002

    def __init__(self, backend, topic, queue, rep_schema):
        self.topic = topic
        self._backend = backend
        self._queue = queue
        self._rep_schema = rep_schema
        self._mailboxes: dict[int, RingBuffer] = {}
        self._reply_seq: dict[int, int] = {}

    def drain(self, timeout_s: float = 0.0):
        deadline = time.monotonic() + timeout_s
        while True:
            requests = self._queue.drain()
            if requests or time.monotonic() >= deadline:
                return requests
            time.sleep(self.POLL_S)

    def reply(self, request, payload=None, error=""):
        mailbox = self._mailboxes.get(request.meta)
        if mailbox is None:
            mailbox = self._backend._attach_mailbox(self.topic, request.meta, self._rep_schema)
            self._mailboxes[request.meta] = mailbox
        body = bytearray(max(1, self._rep_schema.payload_nbytes))
        ok = 0
        if error:
            error = base.clip_error(error)
        else:
            conformed = sc.conform(self._rep_schema, payload or {})
            sc.encode_into(self._rep_schema, conformed, body, 0)
            ok = 1
        seq = self._reply_seq.get(request.meta, 0) + 1
        self._reply_seq[request.meta] = seq
        mailbox.put(seq, {"body": bytes(body), "error": error, "id": request.id, "ok": ok})

    def close(self):
        pass
