"""TCP backend: a broker process relays samples and requests over sockets.

Wire framing (docs/wire.md): every frame is a u32 little-endian length
followed by ``u8 type | u32 meta_len | meta JSON | raw bytes``. Sample and
request payloads reuse the fixed-layout codec, so the bytes on the wire are
the same bytes a shared-memory slot would hold.

The broker keeps a latest-wins ring per topic (late subscribers see current
state) and routes requests to the topic's replier connection and replies
back to the requester that issued the id. Pub/sub is best-effort
latest-value; RPC is at-most-once with client-side timeouts.

Clock domains: on connect, the broker returns its monotonic clock reading;
endpoints estimate ``offset = broker_clock - (t0 + t1) / 2`` so spans
recorded on different machines can be aligned.
"""

from __future__ import annotations

import errno
import json
import select
import socket
import struct
import threading
from typing import Any, Mapping

from .. import schema as sc
from ..clock import now_ns
from ..errors import (AddressInUse, Disconnected, Empty, NonMonotoneTimestamp,
                      NoSampleBefore, NotEnoughSamples, SchemaMismatch, Timeout)
from ..reqqueue import CommandReply, CommandRequest
from ..ring import RingBuffer
from . import base

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<BI")

HELLO, HELLO_OK = 1, 2
PUB = 3
GET_LATEST, LATEST = 4, 5
GET_LAST_K, LAST_K = 6, 7
GET_NEAREST, NEAREST = 8, 9
REQ, REP = 10, 11
ERR = 12


def _pack_frame(ftype: int, meta: dict, raw: bytes = b"") -> bytes:
    meta_raw = json.dumps(meta, separators=(",", ":")).encode()
    return (_LEN.pack(1 + 4 + len(meta_raw) + len(raw))
            + _HEAD.pack(ftype, len(meta_raw)) + meta_raw + raw)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        part = sock.recv(n - len(chunks))
        if not part:
            raise Disconnected("peer closed the connection")
        chunks += part
    return bytes(chunks)


def _recv_frame(sock: socket.socket) -> tuple[int, dict, bytes]:
    (length,) = _LEN.unpack(_recv_exact(sock, 4))
    body = _recv_exact(sock, length)
    ftype, meta_len = _HEAD.unpack_from(body, 0)
    meta = json.loads(body[5:5 + meta_len]) if meta_len else {}
    return ftype, meta, body[5 + meta_len:]


def _parse_frames(buf: bytearray) -> list[tuple[int, dict, bytes]]:
    """Consume complete frames from the front of ``buf``."""
    frames = []
    while len(buf) >= 4:
        (length,) = _LEN.unpack_from(buf, 0)
        if len(buf) < 4 + length:
            break
        body = bytes(buf[4:4 + length])
        del buf[:4 + length]
        ftype, meta_len = _HEAD.unpack_from(body, 0)
        meta = json.loads(body[5:5 + meta_len]) if meta_len else {}
        frames.append((ftype, meta, body[5 + meta_len:]))
    return frames


class _BrokerTopic:
    def __init__(self):
        self.ring: RingBuffer | None = None
        self.schema_hash: int | None = None
        self.replier: "_BrokerConn | None" = None
        self.lock = threading.Lock()


class _BrokerConn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.send_lock = threading.Lock()

    def send(self, frame: bytes) -> bool:
        try:
            with self.send_lock:
                self.sock.sendall(frame)
            return True
        except OSError:
            return False


class Broker:
    """Relay for one listen address; runs reader threads per connection."""

    def __init__(self, host: str, port: int):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((host, port))
        except OSError as exc:
            self._listener.close()
            if exc.errno == errno.EADDRINUSE:
                raise AddressInUse(f"{host}:{port} is already bound")
            raise
        self._listener.listen(64)
        self.host, self.port = self._listener.getsockname()
        self._topics: dict[str, _BrokerTopic] = {}
        self._pending: dict[int, _BrokerConn] = {}  # request id -> requester conn
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._threads: list[threading.Thread] = []
        accept = threading.Thread(target=self._accept_loop, daemon=True,
                                  name=f"rio-broker-{self.port}")
        accept.start()
        self._threads.append(accept)

    def _topic(self, name: str) -> _BrokerTopic:
        with self._lock:
            return self._topics.setdefault(name, _BrokerTopic())

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve_conn, args=(sock,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, sock: socket.socket):
        conn = _BrokerConn(sock)
        role = topic_name = None
        try:
            ftype, meta, _ = _recv_frame(sock)
            if ftype != HELLO:
                conn.send(_pack_frame(ERR, {"message": "expected hello"}))
                return
            role, topic_name = meta["role"], meta["topic"]
            topic = self._topic(topic_name)
            with topic.lock:
                if meta.get("schema_hash") is not None:
                    if topic.schema_hash is None:
                        topic.schema_hash = meta["schema_hash"]
                    elif topic.schema_hash != meta["schema_hash"]:
                        conn.send(_pack_frame(ERR, {"message": "schema mismatch on topic"}))
                        return
                if role == "publisher" and topic.ring is None:
                    desc = sc.SchemaDescriptor.from_json(meta["schema"])
                    topic.ring = RingBuffer.local(desc, int(meta.get("capacity", 128)))
                if role == "replier":
                    topic.replier = conn
            conn.send(_pack_frame(HELLO_OK, {"clock_ns": now_ns()}))
            while not self._closed.is_set():
                ftype, meta, raw = _recv_frame(sock)
                self._handle(conn, topic, role, ftype, meta, raw)
        except Disconnected:
            pass
        except OSError:
            pass
        finally:
            if role == "replier" and topic_name is not None:
                topic = self._topic(topic_name)
                with topic.lock:
                    if topic.replier is conn:
                        topic.replier = None
            try:
                sock.close()
            except OSError:
                pass

    def _handle(self, conn, topic, role, ftype, meta, raw):
        if ftype == PUB:
            with topic.lock:
                if topic.ring is not None:
                    try:
                        topic.ring.put_bytes(raw)
                    except NonMonotoneTimestamp:
                        pass  # stale publisher restart; latest-wins keeps newest
        elif ftype == GET_LATEST:
            with topic.lock:
                try:
                    sample = topic.ring.latest_bytes() if topic.ring else None
                except Empty:
                    sample = None
            if sample is None:
                conn.send(_pack_frame(LATEST, {"empty": True}))
            else:
                conn.send(_pack_frame(LATEST, {"empty": False}, sample))
        elif ftype == GET_LAST_K:
            with topic.lock:
                try:
                    if topic.ring is None:
                        raise Empty("no samples")
                    pairs = topic.ring._gather(meta["k"])
                    samples = [data for _, data in pairs]
                    reply = _pack_frame(LAST_K, {"count": len(samples)}, b"".join(samples))
                except (Empty, NotEnoughSamples) as exc:
                    reply = _pack_frame(LAST_K, {"count": -1, "error": str(exc)})
            conn.send(reply)
        elif ftype == GET_NEAREST:
            with topic.lock:
                try:
                    if topic.ring is None:
                        raise Empty("no samples")
                    samples = [d for _, d in topic.ring._gather(topic.ring.retained_count())]
                    best = None
                    for data in samples:
                        _, ts = sc.read_sample_header(data)
                        if ts <= meta["t"]:
                            best = data
                    if best is None:
                        raise NoSampleBefore(f"no sample at or before {meta['t']}")
                    reply = _pack_frame(NEAREST, {}, best)
                except (Empty, NoSampleBefore) as exc:
                    reply = _pack_frame(NEAREST, {"error": str(exc)})
            conn.send(reply)
        elif ftype == REQ:
            with self._lock:
                self._pending[meta["id"]] = conn
            with topic.lock:
                replier = topic.replier
            if replier is not None:
                replier.send(_pack_frame(REQ, meta, raw))
            # no replier: requester times out (at-most-once, no spooling)
        elif ftype == REP:
            with self._lock:
                requester = self._pending.pop(meta["id"], None)
            if requester is not None:
                requester.send(_pack_frame(REP, meta, raw))

    def close(self):
        self._closed.set()
        try:
            self._listener.close()
        except OSError:
            pass


class TcpBackend(base.Backend):
    def __init__(self, kind: base.BackendKind):
        self.kind = kind
        self.host = kind.get("host", "127.0.0.1")
        port = int(kind.get("port", 0))
        self._broker: Broker | None = None
        if kind.get("server", True):
            self._broker = Broker(self.host, port)
            self.port = self._broker.port
        else:
            self.port = port
        self._endpoints: list[Any] = []
        self._closed = False

    def attachable(self) -> base.BackendKind:
        return self.kind.with_config(host=self.host, port=self.port, server=False)

    def _connect(self, hello_meta: dict) -> tuple[socket.socket, int]:
        try:
            sock = socket.create_connection((self.host, self.port), timeout=5.0)
        except OSError as exc:
            raise Disconnected(f"cannot reach broker at {self.host}:{self.port}: {exc}")
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        t0 = now_ns()
        sock.sendall(_pack_frame(HELLO, hello_meta))
        ftype, meta, _ = _recv_frame(sock)
        t1 = now_ns()
        if ftype == ERR:
            sock.close()
            raise SchemaMismatch(meta.get("message", "broker rejected hello"))
        if ftype != HELLO_OK:
            sock.close()
            raise Disconnected(f"unexpected hello response type {ftype}")
        offset = meta["clock_ns"] - (t0 + t1) // 2
        return sock, offset

    def publisher(self, topic, schema, capacity=128):
        sock, offset = self._connect({
            "role": "publisher", "topic": topic, "schema_hash": schema.schema_hash,
            "schema": schema.to_json(), "capacity": capacity,
        })
        ep = _TcpPublisher(topic, schema, sock, offset)
        self._endpoints.append(ep)
        return ep

    def subscriber(self, topic, schema, timeout_s=5.0):
        sock, offset = self._connect({
            "role": "subscriber", "topic": topic, "schema_hash": schema.schema_hash,
        })
        ep = _TcpSubscriber(topic, schema, sock, offset)
        self._endpoints.append(ep)
        return ep

    def requester(self, topic, req_schema, rep_schema):
        sock, offset = self._connect({"role": "requester", "topic": topic})
        ep = _TcpRequester(topic, req_schema, rep_schema, sock, offset)
        self._endpoints.append(ep)
        return ep

    def replier(self, topic, req_schema, rep_schema, capacity=64):
        sock, offset = self._connect({"role": "replier", "topic": topic})
        ep = _TcpReplier(topic, req_schema, rep_schema, sock, offset)
        self._endpoints.append(ep)
        return ep

    def close(self):
        if self._closed:
            return
        self._closed = True
        for ep in self._endpoints:
            try:
                ep.close()
            except OSError:
                pass
        if self._broker is not None:
            self._broker.close()


class _TcpEndpoint:
    def __init__(self, topic, sock, clock_offset_ns):
        self.topic = topic
        self._sock = sock
        self.clock_offset_ns = clock_offset_ns

    def _send(self, frame: bytes):
        try:
            self._sock.sendall(frame)
        except OSError as exc:
            raise Disconnected(f"broker connection lost: {exc}")

    def _recv(self, timeout_s: float | None = None):
        try:
            self._sock.settimeout(timeout_s)
            return _recv_frame(self._sock)
        except socket.timeout:
            raise Timeout(f"no response on topic {self.topic!r}")
        except OSError as exc:
            raise Disconnected(f"broker connection lost: {exc}")

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


class _TcpPublisher(_TcpEndpoint, base.Publisher):
    def __init__(self, topic, schema, sock, offset):
        super().__init__(topic, sock, offset)
        self.schema = schema

    def publish(self, ts_ns: int, payload: Mapping[str, Any]) -> None:
        payload = sc.conform(self.schema, payload)
        sample = sc.encode_sample(self.schema, ts_ns, payload)
        self._send(_pack_frame(PUB, {}, sample))


class _TcpSubscriber(_TcpEndpoint, base.Subscriber):
    def __init__(self, topic, schema, sock, offset):
        super().__init__(topic, sock, offset)
        self.schema = schema

    def latest(self):
        self._send(_pack_frame(GET_LATEST, {}))
        ftype, meta, raw = self._recv(5.0)
        if meta.get("empty"):
            raise Empty(f"no samples on topic {self.topic!r}")
        return sc.decode_sample(self.schema, raw)

    def last_k(self, k):
        self._send(_pack_frame(GET_LAST_K, {"k": k}))
        ftype, meta, raw = self._recv(5.0)
        if meta.get("count", -1) < 0:
            message = meta.get("error", "")
            if "retained" in message or "asked" in message:
                raise NotEnoughSamples(message)
            raise Empty(message)
        size = self.schema.sample_nbytes
        return [sc.decode_sample(self.schema, raw[i * size:(i + 1) * size])
                for i in range(meta["count"])]

    def nearest(self, ts_ns):
        self._send(_pack_frame(GET_NEAREST, {"t": ts_ns}))
        ftype, meta, raw = self._recv(5.0)
        if meta.get("error"):
            message = meta["error"]
            if "before" in message:
                raise NoSampleBefore(message)
            raise Empty(message)
        return sc.decode_sample(self.schema, raw)


class _TcpRequester(_TcpEndpoint, base.Requester):
    def __init__(self, topic, req_schema, rep_schema, sock, offset):
        super().__init__(topic, sock, offset)
        self._req_schema = req_schema
        self._rep_schema = rep_schema
        self._abandoned: set[int] = set()

    def call(self, request: CommandRequest, timeout_ms: float) -> CommandReply:
        args = sc.conform(self._req_schema, request.args)
        raw = bytearray(max(1, self._req_schema.payload_nbytes))
        sc.encode_into(self._req_schema, args, raw, 0)
        self._send(_pack_frame(REQ, {"id": request.id, "ts": request.ts,
                                     "method": request.method}, bytes(raw)))
        deadline = now_ns() + int(timeout_ms * 1e6)
        while True:
            remaining = (deadline - now_ns()) / 1e9
            if remaining <= 0:
                self._abandoned.add(request.id)
                raise Timeout(f"no reply to {request.method!r} within {timeout_ms} ms")
            try:
                ftype, meta, raw = self._recv(remaining)
            except Timeout:
                self._abandoned.add(request.id)
                raise
            if ftype != REP or meta["id"] in self._abandoned:
                self._abandoned.discard(meta.get("id"))
                continue
            if meta["id"] != request.id:
                continue
            if meta["ok"]:
                payload = sc.decode_payload(self._rep_schema, raw)
                return CommandReply(id=request.id, ts=meta["ts"], ok=True, payload=payload)
            return CommandReply(id=request.id, ts=meta["ts"], ok=False,
                                error=meta.get("error", ""))


class _TcpReplier(_TcpEndpoint, base.Replier):
    def __init__(self, topic, req_schema, rep_schema, sock, offset):
        super().__init__(topic, sock, offset)
        self._req_schema = req_schema
        self._rep_schema = rep_schema
        self._rx = bytearray()

    def drain(self, timeout_s: float = 0.0):
        requests: list[CommandRequest] = []
        deadline = now_ns() + int(timeout_s * 1e9)
        while True:
            for ftype, meta, raw in _parse_frames(self._rx):
                if ftype != REQ:
                    continue
                args = sc.decode_payload(self._req_schema, raw)
                requests.append(CommandRequest(id=meta["id"], ts=meta["ts"],
                                               method=meta["method"], args=args))
            wait = 0.0 if requests else max(0.0, (deadline - now_ns()) / 1e9)
            readable, _, _ = select.select([self._sock], [], [], wait)
            if not readable:
                return requests
            try:
                chunk = self._sock.recv(1 << 16)
            except OSError as exc:
                raise Disconnected(f"broker connection lost: {exc}")
            if not chunk:
                raise Disconnected("broker closed the connection")
            self._rx += chunk

    def reply(self, request, payload=None, error=""):
        if error:
            self._send(_pack_frame(REP, {"id": request.id, "ts": now_ns(), "ok": False,
                                         "error": base.clip_error(error)}))
            return
        conformed = sc.conform(self._rep_schema, payload or {})
        raw = bytearray(max(1, self._rep_schema.payload_nbytes))
        sc.encode_into(self._rep_schema, conformed, raw, 0)
        self._send(_pack_frame(REP, {"id": request.id, "ts": now_ns(), "ok": True},
                               bytes(raw)))
