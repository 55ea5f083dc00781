"""Common endpoint interface every transport backend implements.

Nodes and stations only ever see these classes, so swapping the transport is
a configuration change. All calls are blocking with explicit timeouts; an
endpoint belongs to the thread that created it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

from .. import schema as sc
from ..reqqueue import CommandReply, CommandRequest

ERROR_MAX_BYTES = 256


@dataclass(frozen=True)
class BackendKind:
    """Which transport to use and how to reach it.

    kind: one of ``inproc`` (threads in one process), ``shm`` (shared-memory
    segments across processes), ``tcp`` (networked broker).
    config keys: tcp -> host, port; shm -> namespace; inproc -> none.
    """

    kind: str
    config: tuple[tuple[str, Any], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("inproc", "shm", "tcp"):
            raise ValueError(f"unknown middleware kind {self.kind!r}")
        if isinstance(self.config, dict):
            object.__setattr__(self, "config", tuple(sorted(self.config.items())))

    def get(self, key: str, default=None):
        return dict(self.config).get(key, default)

    def with_config(self, **updates) -> "BackendKind":
        merged = dict(self.config)
        merged.update(updates)
        return BackendKind(self.kind, tuple(sorted(merged.items())))


def reply_envelope_schema(rep_schema: sc.SchemaDescriptor) -> sc.SchemaDescriptor:
    """Fixed-layout envelope a packed reply travels in (shm mailboxes)."""
    return sc.SchemaDescriptor((
        sc.FieldSpec("body", "u8", (max(1, rep_schema.payload_nbytes),)),
        sc.FieldSpec("error", "utf8", (), max_bytes=ERROR_MAX_BYTES),
        sc.FieldSpec("id", "i64", ()),
        sc.FieldSpec("ok", "i64", ()),
    ))


def clip_error(message: str) -> str:
    raw = message.encode("utf-8")[:ERROR_MAX_BYTES - 4]
    return raw.decode("utf-8", errors="ignore")


class Publisher:
    """Owns the topic's stream; one publisher per topic."""

    topic: str
    schema: sc.SchemaDescriptor

    def publish(self, ts_ns: int, payload: Mapping[str, Any]) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class Subscriber:
    topic: str
    schema: sc.SchemaDescriptor

    def latest(self) -> tuple[int, dict]:
        raise NotImplementedError

    def last_k(self, k: int) -> list[tuple[int, dict]]:
        raise NotImplementedError

    def nearest(self, ts_ns: int) -> tuple[int, dict]:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class Requester:
    topic: str

    def call(self, request: CommandRequest, timeout_ms: float) -> CommandReply:
        """At-most-once request; raises Timeout/Disconnected on failure.

        A reply whose ``ok`` flag is false is returned as-is (the caller
        decides whether to raise RemoteError); transport failures raise.
        """
        raise NotImplementedError

    def call_method(self, method: str, args: Mapping[str, Any],
                    timeout_ms: float = 1000.0) -> CommandReply:
        from ..clock import now_ns
        from ..reqqueue import next_request_id
        return self.call(CommandRequest(id=next_request_id(), ts=now_ns(),
                                        method=method, args=dict(args)), timeout_ms)

    def close(self) -> None:
        raise NotImplementedError


class Replier:
    topic: str

    def drain(self, timeout_s: float = 0.0) -> list[CommandRequest]:
        """Pending requests in admission order. ``timeout_s`` > 0 waits that
        long for the first request before giving up."""
        raise NotImplementedError

    def reply(self, request: CommandRequest, payload: Mapping[str, Any] | None = None,
              error: str = "") -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class Backend:
    """Mints endpoints for one transport. Close is idempotent."""

    kind: BackendKind

    def publisher(self, topic: str, schema: sc.SchemaDescriptor,
                  capacity: int = 128) -> Publisher:
        raise NotImplementedError

    def subscriber(self, topic: str, schema: sc.SchemaDescriptor,
                   timeout_s: float = 5.0) -> Subscriber:
        raise NotImplementedError

    def requester(self, topic: str, req_schema: sc.SchemaDescriptor,
                  rep_schema: sc.SchemaDescriptor) -> Requester:
        raise NotImplementedError

    def replier(self, topic: str, req_schema: sc.SchemaDescriptor,
                rep_schema: sc.SchemaDescriptor, capacity: int = 64) -> Replier:
        raise NotImplementedError

    def attachable(self) -> BackendKind:
        """Descriptor a child process can use to reach the same transport."""
        return self.kind

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
