"""Swappable transport backends behind one endpoint interface.

Three backends ship: ``inproc`` (threads, one address space), ``shm``
(shared-memory segments, zero-copy across processes), and ``tcp`` (broker
over sockets, multi-machine capable). Station configs pick one with the
``middleware:`` key; nodes and user logic never see the difference.
"""

from __future__ import annotations

from .base import Backend, BackendKind, Publisher, Replier, Requester, Subscriber
from .inproc import InprocBackend
from .shm import ShmBackend
from .tcp import TcpBackend

__all__ = [
    "Backend", "BackendKind", "Publisher", "Subscriber", "Requester", "Replier",
    "open_backend", "backend_kind_from_config",
]

_BACKENDS = {
    "inproc": InprocBackend,
    "shm": ShmBackend,
    "tcp": TcpBackend,
}


def open_backend(kind: BackendKind | str) -> Backend:
    """Open a transport backend; close() releases every resource it minted."""
    if isinstance(kind, str):
        kind = BackendKind(kind)
    return _BACKENDS[kind.kind](kind)


def backend_kind_from_config(value) -> BackendKind:
    """Parse the station-config ``middleware`` entry (string or mapping)."""
    if isinstance(value, BackendKind):
        return value
    if isinstance(value, str):
        return BackendKind(value)
    if isinstance(value, dict):
        value = dict(value)
        kind = value.pop("kind")
        return BackendKind(kind, tuple(sorted(value.items())))
    raise ValueError(f"cannot interpret middleware config {value!r}")
