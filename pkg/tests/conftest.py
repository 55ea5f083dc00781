import os
import uuid

import pytest

from rio.middleware import BackendKind, open_backend

ALL_BACKENDS = ["inproc", "shm", "tcp"]


def make_kind(name: str) -> BackendKind:
    if name == "shm":
        return BackendKind("shm", {"namespace": f"t{os.getpid()}-{uuid.uuid4().hex[:8]}"})
    if name == "tcp":
        return BackendKind("tcp", {"host": "127.0.0.1", "port": 0})
    return BackendKind("inproc")


@pytest.fixture(params=ALL_BACKENDS)
def backend_name(request):
    return request.param


@pytest.fixture
def backend(backend_name):
    be = open_backend(make_kind(backend_name))
    yield be
    be.close()
