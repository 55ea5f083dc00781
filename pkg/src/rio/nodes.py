"""Template node: lifecycle, execution patterns, and client proxies.

A node spec names its publish rate, example payloads (used to infer every
schema), and an API of methods. ``make_pair`` produces a matched server
launcher and client connector for any backend: the server runs as a thread
for the in-process backend and as a forked process for shared-memory and
TCP, publishing on ``{name}/state`` and answering requests on ``{name}/req``.

Execution patterns: ``pub`` ticks the publish hook at rate_hz, ``req``
drains the request queue each iteration, ``pubreq`` does both in one loop.
A complementary hook can also run in a separate worker loop. Ready fires
once, after setup and before the first published sample is visible; exit
fires once, on clean stop or on the first user-hook error (fail-fast).
"""

from __future__ import annotations

import multiprocessing as mp
import threading
import traceback
from dataclasses import dataclass, field as dc_field
from typing import Any, Callable, Mapping

from . import schema as sc
from .clock import RateKeeper, now_ns
from .errors import (Disconnected, Empty, ReadyTimeout, RemoteError,
                     SchemaInferenceError, Timeout, UserHookError)
from .middleware import Backend, BackendKind, open_backend
from .middleware.base import Replier

_FORK = mp.get_context("fork")

PROF_SCHEMA = sc.SchemaDescriptor((
    sc.FieldSpec("end", "i64", ()),
    sc.FieldSpec("start", "i64", ()),
))


class NodeLogic:
    """User hooks. Subclass (or duck-type) and override what the pattern needs."""

    def setup(self, ctx: "NodeContext") -> None:
        pass

    def publish(self) -> Mapping[str, Any] | None:
        """Payload for this tick, or None to skip publishing."""
        raise NotImplementedError

    def handle(self, method: str, args: Mapping[str, Any]) -> Mapping[str, Any]:
        raise NotImplementedError

    def teardown(self) -> None:
        pass


@dataclass(frozen=True)
class ApiMethod:
    name: str
    example_args: Mapping[str, Any]
    example_reply: Mapping[str, Any]


@dataclass
class NodeSpec:
    name: str
    pattern: str  # pub | req | pubreq
    make_logic: Callable[..., NodeLogic]
    rate_hz: float = 0.0
    example_data: Mapping[str, Any] | None = None
    api: tuple[ApiMethod, ...] = ()
    worker_loop: str | None = None  # complementary pattern in a side thread
    capacity: int = 128
    params: dict = dc_field(default_factory=dict)

    @property
    def state_topic(self) -> str:
        return f"{self.name}/state"

    @property
    def req_topic(self) -> str:
        return f"{self.name}/req"

    @property
    def prof_topic(self) -> str:
        return f"{self.name}/prof"

    def wants_pub(self) -> bool:
        return self.pattern in ("pub", "pubreq") or self.worker_loop == "pub"

    def wants_req(self) -> bool:
        return self.pattern in ("req", "pubreq") or self.worker_loop == "req"


@dataclass(frozen=True)
class NodeSchemas:
    state: sc.SchemaDescriptor | None
    req_envelope: sc.SchemaDescriptor | None
    rep_envelope: sc.SchemaDescriptor | None
    per_method_req: dict[str, sc.SchemaDescriptor]
    per_method_rep: dict[str, sc.SchemaDescriptor]


def infer_node_schemas(spec: NodeSpec) -> NodeSchemas:
    try:
        state = sc.infer_schema(spec.example_data) if spec.wants_pub() else None
    except Exception as exc:
        raise SchemaInferenceError(f"node {spec.name!r} example_data: {exc}") from exc
    names = [m.name for m in spec.api]
    if len(set(names)) != len(names):
        raise SchemaInferenceError(f"node {spec.name!r} has duplicate api names: {names}")
    if spec.wants_pub() and spec.rate_hz <= 0:
        raise SchemaInferenceError(f"node {spec.name!r} publishes but rate_hz <= 0")
    if spec.wants_req() and not spec.api:
        raise SchemaInferenceError(f"node {spec.name!r} handles requests but has no api")
    per_req, per_rep = {}, {}
    for m in spec.api:
        try:
            per_req[m.name] = sc.infer_schema(m.example_args) if m.example_args \
                else sc.infer_schema({"_": 0})
            per_rep[m.name] = sc.infer_schema(m.example_reply) if m.example_reply \
                else sc.infer_schema({"_": 0})
        except Exception as exc:
            raise SchemaInferenceError(f"node {spec.name!r} api {m.name!r}: {exc}") from exc
    req_env = rep_env = None
    if spec.api:
        req_size = max(max(1, s.payload_nbytes) for s in per_req.values())
        rep_size = max(max(1, s.payload_nbytes) for s in per_rep.values())
        req_env = sc.SchemaDescriptor((sc.FieldSpec("body", "u8", (req_size,)),))
        rep_env = sc.SchemaDescriptor((sc.FieldSpec("body", "u8", (rep_size,)),))
    return NodeSchemas(state, req_env, rep_env, per_req, per_rep)


def _pack_envelope(method_schema: sc.SchemaDescriptor, payload: Mapping[str, Any],
                   envelope: sc.SchemaDescriptor) -> dict:
    size = envelope.fields[0].shape[0]
    buf = bytearray(size)
    sc.encode_into(method_schema, sc.conform(method_schema, payload), buf, 0)
    return {"body": bytes(buf)}


_PLACEHOLDER = ("_",)  # schema for api methods that take or return nothing


def _unpack_envelope(method_schema: sc.SchemaDescriptor, payload: Mapping[str, Any]) -> dict:
    decoded = sc.decode_payload(method_schema, payload["body"])
    if method_schema.field_names == _PLACEHOLDER:
        return {}
    return decoded


class _Events:
    """ready/exit/stop signals usable from threads or forked processes."""

    def __init__(self, cross_process: bool):
        make = _FORK.Event if cross_process else threading.Event
        self.ready = make()
        self.exit = make()
        self.stop = make()


class NodeContext:
    """What user hooks get to touch inside the server loop."""

    def __init__(self, spec: NodeSpec, publisher, params: dict):
        self.spec = spec
        self.params = params
        self._publisher = publisher
        self._last_pub_ts = 0

    def now_ns(self) -> int:
        return now_ns()

    def publish(self, payload: Mapping[str, Any]) -> None:
        """Write to the state stream directly (usable from request hooks)."""
        if self._publisher is None:
            raise UserHookError(f"node {self.spec.name!r} has no publish stream")
        ts = now_ns()
        if ts <= self._last_pub_ts:
            ts = self._last_pub_ts + 1
        self._publisher.publish(ts, payload)
        self._last_pub_ts = ts


class NodeHandle:
    """Parent-side view of a launched server node."""

    def __init__(self, spec: NodeSpec, events: _Events, runner):
        self.spec = spec
        self.name = spec.name
        self._events = events
        self._runner = runner  # Thread or Process

    @property
    def ready_event(self):
        return self._events.ready

    @property
    def exit_event(self):
        return self._events.exit

    def wait_ready(self, timeout_s: float) -> bool:
        return self._events.ready.wait(timeout_s)

    def stop(self) -> None:
        self._events.stop.set()

    def join(self, timeout_s: float = 10.0) -> None:
        self._runner.join(timeout_s)
        if isinstance(self._runner, _FORK.Process) and self._runner.is_alive():
            self._runner.terminate()
            self._runner.join(2.0)


def _server_main(spec: NodeSpec, backend_or_kind, events: _Events) -> None:
    backend = None
    owns_backend = isinstance(backend_or_kind, BackendKind)
    try:
        backend = open_backend(backend_or_kind) if owns_backend else backend_or_kind
        schemas = infer_node_schemas(spec)
        publisher = None
        replier: Replier | None = None
        if spec.wants_pub():
            publisher = backend.publisher(spec.state_topic, schemas.state, spec.capacity)
        prof = backend.publisher(spec.prof_topic, PROF_SCHEMA, 512)
        if spec.wants_req():
            replier = backend.replier(spec.req_topic, schemas.req_envelope,
                                      schemas.rep_envelope)
        logic = spec.make_logic(**spec.params)
        ctx = NodeContext(spec, publisher, spec.params)
        logic.setup(ctx)

        def do_publish():
            payload = logic.publish()
            if payload is not None:
                ctx.publish(payload)

        def do_requests(timeout_s: float = 0.0):
            for request in replier.drain(timeout_s):
                method = request.method
                method_schema = schemas.per_method_req.get(method)
                if method_schema is None:
                    _safe_reply(replier, request, error=f"unknown method {method!r}")
                    continue
                args = _unpack_envelope(method_schema, request.args)
                result = logic.handle(method, args)
                rep_schema = schemas.per_method_rep[method]
                if rep_schema.field_names == _PLACEHOLDER:
                    result = {"_": 0}
                reply_payload = _pack_envelope(rep_schema, result, schemas.rep_envelope)
                _safe_reply(replier, request, payload=reply_payload)

        worker = None
        if spec.worker_loop == "req":
            worker = threading.Thread(
                target=_req_worker, args=(events, do_requests), daemon=True,
                name=f"{spec.name}-req-worker")
        elif spec.worker_loop == "pub":
            worker = threading.Thread(
                target=_pub_worker, args=(events, do_publish, spec.rate_hz), daemon=True,
                name=f"{spec.name}-pub-worker")

        events.ready.set()
        if worker is not None:
            worker.start()

        tick = 0
        if spec.pattern in ("pub", "pubreq"):
            keeper = RateKeeper(spec.rate_hz)
            while not events.stop.is_set():
                keeper.wait()
                start = now_ns()
                do_publish()
                if spec.pattern == "pubreq":
                    do_requests()
                tick += 1
                prof.publish(tick, {"start": start, "end": now_ns()})
        else:  # req-only main loop
            while not events.stop.is_set():
                start = now_ns()
                do_requests(timeout_s=0.01)
                tick += 1
                try:
                    prof.publish(tick, {"start": start, "end": now_ns()})
                except Exception:
                    pass
        if worker is not None:
            worker.join(timeout=2.0)
        logic.teardown()
    except Exception:
        traceback.print_exc()
    finally:
        events.exit.set()
        if owns_backend and backend is not None:
            backend.close()


def _safe_reply(replier, request, payload=None, error=""):
    try:
        replier.reply(request, payload=payload, error=error)
    except Disconnected:
        pass  # requester is gone; at-most-once delivery allows dropping


def _req_worker(events: _Events, do_requests):
    try:
        while not events.stop.is_set():
            do_requests(timeout_s=0.01)
    except Exception:
        traceback.print_exc()
        events.exit.set()


def _pub_worker(events: _Events, do_publish, rate_hz: float):
    try:
        keeper = RateKeeper(rate_hz)
        while not events.stop.is_set():
            keeper.wait()
            do_publish()
    except Exception:
        traceback.print_exc()
        events.exit.set()


class Sample:
    """Latest-state view with attribute access into the payload."""

    __slots__ = ("ts_ns", "payload")

    def __init__(self, ts_ns: int, payload: dict):
        self.ts_ns = ts_ns
        self.payload = payload

    def __getattr__(self, key):
        try:
            return self.payload[key]
        except KeyError:
            raise AttributeError(key)

    def __getitem__(self, key):
        return self.payload[key]

    def __repr__(self):
        return f"Sample(ts_ns={self.ts_ns}, keys={sorted(self.payload)})"


class ClientProxy:
    """Client side of a node: latest-state reads plus transparent api calls."""

    def __init__(self, spec: NodeSpec, backend: Backend, events: _Events,
                 call_timeout_ms: float = 2000.0):
        self.spec = spec
        self.name = spec.name
        self._events = events
        self._schemas = infer_node_schemas(spec)
        self._call_timeout_ms = call_timeout_ms
        self._subscriber = None
        self._requester = None
        if spec.wants_pub():
            self._subscriber = backend.subscriber(spec.state_topic, self._schemas.state)
        if spec.api:
            self._requester = backend.requester(spec.req_topic, self._schemas.req_envelope,
                                                self._schemas.rep_envelope)
        for m in spec.api:
            setattr(self, m.name, self._bind(m))

    def _check_alive(self):
        if self._events.exit.is_set():
            raise Disconnected(f"node {self.name!r} exited")

    def latest(self) -> Sample:
        self._check_alive()
        ts, payload = self._subscriber.latest()
        return Sample(ts, payload)

    def last_k(self, k: int) -> list[Sample]:
        self._check_alive()
        return [Sample(ts, payload) for ts, payload in self._subscriber.last_k(k)]

    def nearest(self, ts_ns: int) -> Sample:
        self._check_alive()
        ts, payload = self._subscriber.nearest(ts_ns)
        return Sample(ts, payload)

    def _bind(self, m: ApiMethod):
        req_schema = self._schemas.per_method_req[m.name]
        rep_schema = self._schemas.per_method_rep[m.name]
        arg_names = req_schema.field_names

        def call(*args, **kwargs):
            self._check_alive()
            if args:
                if len(args) > len(arg_names):
                    raise TypeError(f"{m.name}() takes at most {len(arg_names)} arguments")
                kwargs.update(zip(arg_names, args))
            if arg_names == _PLACEHOLDER and not kwargs:
                kwargs = {"_": 0}
            payload = _pack_envelope(req_schema, kwargs, self._schemas.req_envelope)
            from .reqqueue import CommandRequest, next_request_id
            request = CommandRequest(id=next_request_id(), ts=now_ns(),
                                     method=m.name, args=payload)
            try:
                reply = self._requester.call(request, self._call_timeout_ms)
            except Timeout:
                self._check_alive()  # node death surfaces as Disconnected
                raise
            if not reply.ok:
                raise RemoteError(reply.error)
            return _unpack_envelope(rep_schema, reply.payload)

        call.__name__ = m.name
        return call

    def close(self):
        for ep in (self._subscriber, self._requester):
            if ep is not None:
                ep.close()


class ServerLauncher:
    def __init__(self, spec: NodeSpec, backend: Backend):
        self.spec = spec
        self._backend = backend
        cross_process = backend.kind.kind in ("shm", "tcp")
        self.events = _Events(cross_process)
        self._cross_process = cross_process

    def start(self) -> NodeHandle:
        infer_node_schemas(self.spec)  # surface SchemaInferenceError in the parent
        if self._cross_process:
            runner = _FORK.Process(target=_server_main, name=f"rio-{self.spec.name}",
                                   args=(self.spec, self._backend.attachable(), self.events),
                                   daemon=True)
        else:
            runner = threading.Thread(target=_server_main, name=f"rio-{self.spec.name}",
                                      args=(self.spec, self._backend, self.events),
                                      daemon=True)
        runner.start()
        return NodeHandle(self.spec, self.events, runner)


class ClientConnector:
    def __init__(self, spec: NodeSpec, backend: Backend, events: _Events):
        self.spec = spec
        self._backend = backend
        self._events = events

    def connect(self, call_timeout_ms: float = 2000.0) -> ClientProxy:
        return ClientProxy(self.spec, self._backend, self._events, call_timeout_ms)


def make_pair(spec: NodeSpec, backend: Backend) -> tuple[ServerLauncher, ClientConnector]:
    """Matched server launcher and client connector sharing lifecycle events."""
    infer_node_schemas(spec)  # validate eagerly: bad specs fail at pair time
    launcher = ServerLauncher(spec, backend)
    connector = ClientConnector(spec, backend, launcher.events)
    return launcher, connector


def await_all_ready(handles: list[NodeHandle], timeout_ms: float = 10_000.0) -> None:
    deadline = now_ns() + int(timeout_ms * 1e6)
    stragglers = []
    for handle in handles:
        remaining = max(0.0, (deadline - now_ns()) / 1e9)
        if not handle.wait_ready(remaining):
            stragglers.append(handle.name)
    if stragglers:
        raise ReadyTimeout(stragglers)


def shutdown_all(handles: list[NodeHandle]) -> None:
    for handle in handles:
        handle.stop()
    for handle in handles:
        handle.join()
