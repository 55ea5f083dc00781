"""Timestamped overwrite-oldest ring buffer with wait-free reads.

One writer, many readers. Every slot carries a version stamp (seqlock): the
writer bumps it to odd before rewriting the slot and to even after, so a
reader that copies a slot while it is being rewritten detects the tear and
retries instead of observing a half-written sample. The writer never blocks
on readers; readers that fall behind see gaps.

The buffer memory is caller-provided (bytearray for in-process use, a
shared-memory view for cross-process use), so the exact same layout and code
back both.
"""

from __future__ import annotations

import struct
from typing import Any, Mapping

from . import schema as sc
from .errors import Empty, NonMonotoneTimestamp, NoSampleBefore, NotEnoughSamples

MAGIC = b"RIOR"
_HEADER = struct.Struct("<4sxxxxQQQ")  # magic, put_count, last_ts, capacity
HEADER_SIZE = _HEADER.size
_U64 = struct.Struct("<Q")

DEFAULT_CAPACITY = 128


class RingBuffer:
    def __init__(self, buf, schema: sc.SchemaDescriptor, capacity: int,
                 create: bool = True):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        need = self.required_bytes(schema, capacity)
        if len(buf) < need:
            raise ValueError(f"buffer too small: {len(buf)} < {need}")
        self.buf = buf
        self.schema = schema
        self.capacity = capacity
        self.slot_nbytes = 8 + schema.sample_nbytes
        if create:
            _HEADER.pack_into(buf, 0, MAGIC, 0, 0, capacity)
        else:
            magic, _, _, cap = _HEADER.unpack_from(buf, 0)
            if magic != MAGIC:
                raise ValueError(f"not a ring buffer (magic {magic!r})")
            if cap != capacity:
                raise ValueError(f"capacity mismatch: segment has {cap}, expected {capacity}")

    @classmethod
    def required_bytes(cls, schema: sc.SchemaDescriptor, capacity: int) -> int:
        return HEADER_SIZE + capacity * (8 + schema.sample_nbytes)

    @classmethod
    def local(cls, schema: sc.SchemaDescriptor,
              capacity: int = DEFAULT_CAPACITY) -> "RingBuffer":
        return cls(bytearray(cls.required_bytes(schema, capacity)), schema, capacity)

    # -- header accessors ----------------------------------------------------

    @property
    def put_count(self) -> int:
        return _U64.unpack_from(self.buf, 8)[0]

    @property
    def last_ts(self) -> int:
        return _U64.unpack_from(self.buf, 16)[0]

    def retained_count(self) -> int:
        return min(self.put_count, self.capacity)

    def _slot_offset(self, put_index: int) -> int:
        return HEADER_SIZE + (put_index % self.capacity) * self.slot_nbytes

    # -- writer ----------------------------------------------------------------

    def put(self, ts_ns: int, payload: Mapping[str, Any]) -> None:
        """Publish one sample. Timestamps must be strictly increasing."""
        payload = sc.conform(self.schema, payload)
        count = self.put_count
        if count > 0 and ts_ns <= self.last_ts:
            raise NonMonotoneTimestamp(f"ts {ts_ns} <= last stored ts {self.last_ts}")
        k = count
        off = self._slot_offset(k)
        _U64.pack_into(self.buf, off, 2 * k + 1)  # odd: slot being rewritten
        sc.write_sample_header(self.schema, ts_ns, self.buf, off + 8)
        sc.encode_into(self.schema, payload, self.buf, off + 8 + sc.SAMPLE_HEADER_SIZE)
        _U64.pack_into(self.buf, off, 2 * k + 2)  # even: committed
        _U64.pack_into(self.buf, 16, ts_ns)
        _U64.pack_into(self.buf, 8, k + 1)

    def put_bytes(self, sample: bytes) -> None:
        """Publish an already-encoded sample (header + payload) verbatim."""
        if len(sample) != self.schema.sample_nbytes:
            raise ValueError(f"sample is {len(sample)} bytes, slot holds {self.schema.sample_nbytes}")
        _, ts_ns = sc.read_sample_header(sample)
        count = self.put_count
        if count > 0 and ts_ns <= self.last_ts:
            raise NonMonotoneTimestamp(f"ts {ts_ns} <= last stored ts {self.last_ts}")
        k = count
        off = self._slot_offset(k)
        _U64.pack_into(self.buf, off, 2 * k + 1)
        memoryview(self.buf)[off + 8:off + 8 + len(sample)] = sample
        _U64.pack_into(self.buf, off, 2 * k + 2)
        _U64.pack_into(self.buf, 16, ts_ns)
        _U64.pack_into(self.buf, 8, k + 1)

    # -- readers ---------------------------------------------------------------

    def _read_slot(self, put_index: int) -> tuple[int, bytes] | None:
        """Seqlock copy of one slot. Returns (actual_put_index, sample bytes)
        or None if the slot was mid-rewrite or never written."""
        off = self._slot_offset(put_index)
        for _ in range(64):
            v1 = _U64.unpack_from(self.buf, off)[0]
            if v1 == 0 or v1 % 2 == 1:
                return None
            data = bytes(memoryview(self.buf)[off + 8:off + 8 + self.schema.sample_nbytes])
            v2 = _U64.unpack_from(self.buf, off)[0]
            if v1 == v2:
                return (v1 - 2) // 2, data
        return None

    def _gather(self, want: int) -> list[tuple[int, bytes]]:
        """Most recent ``want`` fully-written samples, ascending by put index."""
        for _ in range(16):
            n = self.put_count
            if n == 0:
                raise Empty("ring buffer holds no samples")
            available = min(n, self.capacity)
            if want > available:
                raise NotEnoughSamples(f"asked for {want}, retained {available}")
            got: list[tuple[int, bytes]] = []
            idx = n - 1
            floor = n - self.capacity  # older slots are overwritten
            while idx >= max(0, floor) and len(got) < want:
                res = self._read_slot(idx)
                # A concurrent writer may have lapped this slot; the sample
                # that lived here is gone (gap), newer data is at a higher idx.
                if res is not None and res[0] == idx:
                    got.append(res)
                idx -= 1
            if len(got) == want:
                got.reverse()
                return got
        raise NotEnoughSamples(f"writer outpaced reader while gathering {want} samples")

    def latest(self) -> tuple[int, dict]:
        """(ts_ns, payload) of the newest committed sample."""
        for _ in range(64):
            n = self.put_count
            if n == 0:
                raise Empty("ring buffer holds no samples")
            res = self._read_slot(n - 1)
            if res is not None and res[0] >= n - 1:
                return sc.decode_sample(self.schema, res[1])
        raise Empty("could not obtain a stable read")

    def latest_bytes(self) -> bytes:
        for _ in range(64):
            n = self.put_count
            if n == 0:
                raise Empty("ring buffer holds no samples")
            res = self._read_slot(n - 1)
            if res is not None and res[0] >= n - 1:
                return res[1]
        raise Empty("could not obtain a stable read")

    def last_k(self, k: int) -> list[tuple[int, dict]]:
        """k most recent samples in ascending timestamp order."""
        if k <= 0:
            raise ValueError(f"k must be positive, got {k}")
        return [sc.decode_sample(self.schema, data) for _, data in self._gather(k)]

    def nearest(self, ts_ns: int) -> tuple[int, dict]:
        """Sample with the greatest timestamp <= ts_ns within the window."""
        samples = self._gather(self.retained_count())
        best = None
        for _, data in samples:
            _, sample_ts = sc.read_sample_header(data)
            if sample_ts <= ts_ns:
                best = data
        if best is None:
            raise NoSampleBefore(f"no retained sample at or before {ts_ns}")
        return sc.decode_sample(self.schema, best)
