"""Node kernel suite. Runs identically under all three backends (the
``backend`` fixture is parameterized), which is what makes backend
substitutability a tested property rather than a claim."""

import time

import pytest

from rio.clock import now_ns
from rio.errors import Disconnected, ReadyTimeout, RemoteError, SchemaInferenceError
from rio.nodes import (ApiMethod, NodeLogic, NodeSpec, await_all_ready, make_pair,
                       shutdown_all)


class CounterLogic(NodeLogic):
    """Publishes an incrementing x; set_x/get_x exercise the request path."""

    def __init__(self, start=0.0):
        self.x = start
        self.calls = []

    def setup(self, ctx):
        self.ctx = ctx

    def publish(self):
        return {"x": self.x}

    def handle(self, method, args):
        self.calls.append((method, dict(args)))
        if method == "set_x":
            self.x = args["value"]
            return {"ack": 1}
        if method == "get_x":
            return {"value": self.x}
        if method == "boom":
            raise RuntimeError("intentional hook failure")
        raise ValueError(f"unhandled method {method}")


API = (
    ApiMethod("set_x", {"value": 0.0}, {"ack": 0}),
    ApiMethod("get_x", {}, {"value": 0.0}),
    ApiMethod("boom", {}, {"ack": 0}),
)


def counter_spec(name, pattern="pubreq", rate=100.0, worker=None):
    return NodeSpec(name=name, pattern=pattern, make_logic=CounterLogic,
                    rate_hz=rate, example_data={"x": 0.0}, api=API,
                    worker_loop=worker)


def start_node(spec, backend, timeout_ms=10_000):
    launcher, connector = make_pair(spec, backend)
    handle = launcher.start()
    await_all_ready([handle], timeout_ms)
    return handle, connector.connect()


def test_pub_node_streams_within_three_periods(backend):
    spec = NodeSpec(name="pubber", pattern="pub", make_logic=CounterLogic,
                    rate_hz=100.0, example_data={"x": 0.0})
    launcher, connector = make_pair(spec, backend)
    handle = launcher.start()
    await_all_ready([handle], 10_000)
    ready_at = now_ns()
    client = connector.connect()
    deadline = ready_at + 3 * int(1e9 / spec.rate_hz) + int(50e6)  # slack for attach
    sample = None
    while now_ns() < deadline:
        try:
            sample = client.latest()
            break
        except Exception:
            time.sleep(0.001)
    shutdown_all([handle])
    assert sample is not None, "no sample within three publish periods of ready"
    assert sample.x == 0.0


def test_duplicate_api_names_rejected(backend):
    spec = NodeSpec(name="dup", pattern="pubreq", make_logic=CounterLogic,
                    rate_hz=10.0, example_data={"x": 0.0},
                    api=(ApiMethod("a", {"v": 0.0}, {}), ApiMethod("a", {"v": 0.0}, {})))
    with pytest.raises(SchemaInferenceError):
        make_pair(spec, backend)


def test_pub_without_rate_rejected(backend):
    spec = NodeSpec(name="norate", pattern="pub", make_logic=CounterLogic,
                    rate_hz=0.0, example_data={"x": 0.0})
    with pytest.raises(SchemaInferenceError):
        make_pair(spec, backend)


def test_set_then_observe_roundtrip(backend):
    handle, client = start_node(counter_spec("echoer"), backend)
    try:
        reply = client.set_x(2.0)
        assert reply == {"ack": 1}
        deadline = time.monotonic() + 2.0
        while time.monotonic() < deadline:
            if client.latest().x == 2.0:
                break
            time.sleep(0.002)
        assert client.latest().x == 2.0
    finally:
        shutdown_all([handle])


def test_requests_processed_in_order_without_coalescing(backend):
    handle, client = start_node(counter_spec("ordered"), backend)
    try:
        for v in (1.0, 2.0, 3.0):
            client.set_x(v)
        got = client.get_x()
        assert got == {"value": 3.0}
    finally:
        shutdown_all([handle])


def test_hook_error_is_fatal_and_clients_see_disconnected(backend):
    handle, client = start_node(counter_spec("fragile"), backend)
    try:
        with pytest.raises((RemoteError, Disconnected)):
            client.boom()
        assert handle.exit_event.wait(5.0), "exit event never fired after hook error"
        with pytest.raises(Disconnected):
            client.get_x()
    finally:
        shutdown_all([handle])


@pytest.mark.parametrize("shape", ["pubreq", "worker"])
def test_pattern_equivalence_pubreq_vs_worker_loop(backend, shape):
    """pubreq and pub+req-worker must be externally indistinguishable."""
    if shape == "pubreq":
        spec = counter_spec("shape-a", pattern="pubreq")
    else:
        spec = counter_spec("shape-b", pattern="pub", worker="req")
    handle, client = start_node(spec, backend)
    try:
        client.set_x(7.5)
        assert client.get_x() == {"value": 7.5}
        deadline = time.monotonic() + 2.0
        seen = None
        while time.monotonic() < deadline and seen != 7.5:
            try:
                seen = client.latest().x
            except Exception:
                pass
            time.sleep(0.002)
        assert seen == 7.5
    finally:
        shutdown_all([handle])


def test_client_api_transparency(backend):
    """client.m(args) returns exactly what the hook returns for those args."""
    handle, client = start_node(counter_spec("transparent"), backend)
    try:
        via_client = client.set_x(3.25)
        direct = CounterLogic()
        via_hook = direct.handle("set_x", {"value": 3.25})
        assert via_client == via_hook
        assert client.get_x() == direct.handle("get_x", {})
    finally:
        shutdown_all([handle])


def test_no_sample_observable_before_ready(backend):
    spec = NodeSpec(name="gate", pattern="pub", make_logic=CounterLogic,
                    rate_hz=200.0, example_data={"x": 0.0})
    launcher, connector = make_pair(spec, backend)
    handle = launcher.start()
    try:
        # poll from the instant of launch; any successful read implies ready fired
        deadline = time.monotonic() + 5.0
        saw_sample = False
        while time.monotonic() < deadline and not saw_sample:
            if backend.kind.kind == "inproc":
                client = connector.connect()
            else:
                if not handle.ready_event.is_set():
                    continue  # cross-process attach blocks until segments exist
                client = connector.connect()
            try:
                client.latest()
                saw_sample = True
                assert handle.ready_event.is_set(), "sample visible before ready"
            except Exception:
                time.sleep(0.001)
        assert saw_sample
    finally:
        shutdown_all([handle])


def test_await_all_ready_reports_stragglers(backend):
    good = counter_spec("good")
    launcher, _ = make_pair(good, backend)
    handle = launcher.start()
    bad = counter_spec("lazy")
    bad_launcher, _ = make_pair(bad, backend)
    bad_handle = bad_launcher.__class__(bad, backend).__dict__  # never started
    from rio.nodes import NodeHandle, _Events

    class _Never:
        def join(self, *_a, **_k):
            pass

    never = NodeHandle(bad, _Events(False), _Never())
    try:
        with pytest.raises(ReadyTimeout) as excinfo:
            await_all_ready([handle, never], timeout_ms=500)
        assert excinfo.value.stragglers == ["lazy"]
    finally:
        shutdown_all([handle])


def test_achieved_rate_within_five_percent(backend):
    spec = NodeSpec(name="metronome", pattern="pub", make_logic=CounterLogic,
                    rate_hz=100.0, example_data={"x": 0.0})
    handle, client = start_node(spec, backend)
    try:
        from rio.middleware import open_backend
        from rio.nodes import PROF_SCHEMA
        prof = backend.subscriber(spec.prof_topic, PROF_SCHEMA)
        deadline = time.monotonic() + 2.0
        first = None
        while time.monotonic() < deadline:
            try:
                first = prof.latest()
                break
            except Exception:
                time.sleep(0.002)
        assert first is not None
        k0, t0 = first[0], now_ns()
        time.sleep(1.0)
        k1, t1 = prof.latest()[0], now_ns()
        achieved = (k1 - k0) / ((t1 - t0) / 1e9)
        assert abs(achieved - 100.0) <= 5.0, f"achieved {achieved:.1f} Hz"
    finally:
        shutdown_all([handle])


def test_fifty_hz_for_one_second_counts_samples(backend):
    spec = NodeSpec(name="fifty", pattern="pub", make_logic=CounterLogic,
                    rate_hz=50.0, example_data={"x": 0.0}, capacity=256)
    handle, client = start_node(spec, backend)
    try:
        from rio.nodes import PROF_SCHEMA
        prof = backend.subscriber(spec.prof_topic, PROF_SCHEMA)
        deadline = time.monotonic() + 2.0
        k0 = None
        while time.monotonic() < deadline:
            try:
                k0 = prof.latest()[0]
                break
            except Exception:
                time.sleep(0.002)
        assert k0 is not None
        t0 = now_ns()
        while now_ns() - t0 < 1_000_000_000:
            time.sleep(0.005)
        k1 = prof.latest()[0]
        published = k1 - k0
        assert 48 <= published <= 52, f"published {published} samples in 1 s at 50 Hz"
    finally:
        shutdown_all([handle])
