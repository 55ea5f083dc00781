"""Node spec registry: station configs reference specs by name."""

from __future__ import annotations

from typing import Callable

from .errors import UnknownRole
from .nodes import NodeSpec

_REGISTRY: dict[str, Callable[..., NodeSpec]] = {}


def register(name: str):
    def deco(factory: Callable[..., NodeSpec]):
        _REGISTRY[name] = factory
        return factory
    return deco


def make_spec(name: str, node_name: str, **params) -> NodeSpec:
    factory = _REGISTRY.get(name)
    if factory is None:
        raise UnknownRole(f"no registered node spec named {name!r} "
                          f"(available: {sorted(_REGISTRY)})")
    return factory(node_name, **params)


def available() -> list[str]:
    return sorted(_REGISTRY)
