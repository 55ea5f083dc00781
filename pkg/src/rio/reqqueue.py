"""FIFO request queue: many producers, one consumer.

Entries live in caller-provided memory (bytearray or shared memory) so the
layout is identical in-process and cross-process. Admission order is defined
by the queue's internal sequence counter, claimed under a small admission
lock; the lock implementation is pluggable (``threading.Lock`` locally, an
``flock``-based lock across processes).
"""

from __future__ import annotations

import itertools
import os
import random
import struct
import threading
from dataclasses import dataclass, field
from typing import Any

from . import schema as sc
from .errors import QueueFull

MAGIC = b"RIOQ"
_HEADER = struct.Struct("<4sxxxxQQQ")  # magic, head, tail, capacity
HEADER_SIZE = _HEADER.size
_U64 = struct.Struct("<Q")

METHOD_MAX_BYTES = 60
DEFAULT_CAPACITY = 64

# entry: u64 commit | u64 id | u64 ts | u64 meta | u32 len + method bytes | args
_ENTRY_FIXED = 8 + 8 + 8 + 8 + 4 + METHOD_MAX_BYTES

_id_counter = itertools.count(1)
_id_base = (os.getpid() & 0xFFFF) << 40 | random.getrandbits(24) << 16


def next_request_id() -> int:
    """Process-unique request id (pid and a random nonce in the high bits)."""
    return _id_base | (next(_id_counter) & 0xFFFF)


@dataclass
class CommandRequest:
    id: int
    ts: int
    method: str
    args: dict[str, Any]
    meta: int = 0  # transport cookie (e.g. reply mailbox nonce), not user data

    def __post_init__(self):
        if not self.method:
            raise ValueError("method must be non-empty")


@dataclass
class CommandReply:
    id: int
    ts: int
    ok: bool
    payload: dict[str, Any] = field(default_factory=dict)
    error: str = ""


class RequestQueue:
    def __init__(self, buf, schema: sc.SchemaDescriptor, capacity: int,
                 lock=None, create: bool = True):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.buf = buf
        self.schema = schema
        self.capacity = capacity
        self.entry_nbytes = _ENTRY_FIXED + schema.payload_nbytes
        self.lock = lock if lock is not None else threading.Lock()
        need = self.required_bytes(schema, capacity)
        if len(buf) < need:
            raise ValueError(f"buffer too small: {len(buf)} < {need}")
        if create:
            _HEADER.pack_into(buf, 0, MAGIC, 0, 0, capacity)
        else:
            magic, _, _, cap = _HEADER.unpack_from(buf, 0)
            if magic != MAGIC:
                raise ValueError(f"not a request queue (magic {magic!r})")
            if cap != capacity:
                raise ValueError(f"capacity mismatch: segment has {cap}, expected {capacity}")

    @classmethod
    def required_bytes(cls, schema: sc.SchemaDescriptor, capacity: int) -> int:
        return HEADER_SIZE + capacity * (_ENTRY_FIXED + schema.payload_nbytes)

    @classmethod
    def local(cls, schema: sc.SchemaDescriptor,
              capacity: int = DEFAULT_CAPACITY) -> "RequestQueue":
        return cls(bytearray(cls.required_bytes(schema, capacity)), schema, capacity)

    @property
    def head(self) -> int:
        return _U64.unpack_from(self.buf, 8)[0]

    @property
    def tail(self) -> int:
        return _U64.unpack_from(self.buf, 16)[0]

    def __len__(self) -> int:
        return self.tail - self.head

    def _entry_offset(self, seq: int) -> int:
        return HEADER_SIZE + (seq % self.capacity) * self.entry_nbytes

    def put(self, request: CommandRequest) -> None:
        method_raw = request.method.encode("utf-8")
        if len(method_raw) > METHOD_MAX_BYTES:
            raise ValueError(f"method name exceeds {METHOD_MAX_BYTES} bytes")
        args = sc.conform(self.schema, request.args)
        with self.lock:
            head, tail = self.head, self.tail
            if tail - head >= self.capacity:
                raise QueueFull(f"queue at capacity {self.capacity}")
            off = self._entry_offset(tail)
            struct.pack_into("<QQQ", self.buf, off + 8, request.id, request.ts, request.meta)
            struct.pack_into("<I", self.buf, off + 32, len(method_raw))
            view = memoryview(self.buf)[off + 36:off + 36 + METHOD_MAX_BYTES]
            view[:len(method_raw)] = method_raw
            if len(method_raw) < METHOD_MAX_BYTES:
                view[len(method_raw):] = bytes(METHOD_MAX_BYTES - len(method_raw))
            sc.encode_into(self.schema, args, self.buf, off + _ENTRY_FIXED)
            _U64.pack_into(self.buf, off, tail + 1)  # commit = admission seq + 1
            _U64.pack_into(self.buf, 16, tail + 1)

    def _read_entry(self, seq: int) -> CommandRequest:
        off = self._entry_offset(seq)
        req_id, ts, meta = struct.unpack_from("<QQQ", self.buf, off + 8)
        (mlen,) = struct.unpack_from("<I", self.buf, off + 32)
        method = bytes(memoryview(self.buf)[off + 36:off + 36 + mlen]).decode("utf-8")
        args = sc.decode_payload(self.schema, self.buf, off + _ENTRY_FIXED)
        return CommandRequest(id=req_id, ts=ts, method=method, args=args, meta=meta)

    def drain(self) -> list[CommandRequest]:
        """All pending requests in admission order; empties the queue."""
        with self.lock:
            head, tail = self.head, self.tail
            out = [self._read_entry(seq) for seq in range(head, tail)]
            _U64.pack_into(self.buf, 8, tail)
        return out
