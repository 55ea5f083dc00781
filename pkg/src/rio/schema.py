"""Payload schemas and the fixed-layout binary codec.

A schema is inferred once from an example payload and then describes every
sample that flows through a ring buffer, request queue, or socket. Layouts
are flat and fixed-size so the same packed bytes can live in a local
bytearray, a shared-memory slot, or a TCP frame without re-encoding.

Wire layout (see docs/wire.md): a sample is the 20-byte header
``magic "RIO1" | u64 schema hash | u64 timestamp ns`` followed by the packed
fields in descriptor order, all little-endian. Strings are stored as a u32
byte length plus the declared maximum byte count (zero padded), which keeps
every slot fixed-size while round-tripping arbitrary utf-8 exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import EmptyExample, SchemaMismatch, UnsupportedValue

SAMPLE_MAGIC = b"RIO1"
SAMPLE_HEADER = struct.Struct("<4sQQ")  # magic, schema hash, timestamp ns
SAMPLE_HEADER_SIZE = SAMPLE_HEADER.size

_NUMERIC = {
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}

# Convenience-path allocation counter: bumped whenever a whole sample buffer
# is allocated (encode_sample). In-place writers (encode_into) never bump it,
# which is what the shared-memory zero-copy test asserts on.
ENCODE_ALLOCS = 0


@dataclass(frozen=True)
class FieldSpec:
    name: str
    dtype: str  # f64 | i64 | u8 | utf8
    shape: tuple[int, ...] = ()
    max_bytes: int = 0  # utf8 only

    def __post_init__(self):
        if self.dtype not in ("f64", "i64", "u8", "utf8"):
            raise UnsupportedValue(f"unknown dtype {self.dtype!r} for field {self.name!r}")
        if self.dtype == "utf8" and self.max_bytes <= 0:
            raise UnsupportedValue(f"utf8 field {self.name!r} needs a positive max_bytes")

    @property
    def nbytes(self) -> int:
        if self.dtype == "utf8":
            return 4 + self.max_bytes
        count = 1
        for d in self.shape:
            count *= d
        return count * _NUMERIC[self.dtype].itemsize


@dataclass(frozen=True)
class SchemaDescriptor:
    fields: tuple[FieldSpec, ...]
    _offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise UnsupportedValue(f"duplicate field names: {names}")
        offsets, off = [], 0
        for f in self.fields:
            offsets.append(off)
            off += f.nbytes
        object.__setattr__(self, "_offsets", tuple(offsets))

    @property
    def payload_nbytes(self) -> int:
        return sum(f.nbytes for f in self.fields)

    @property
    def sample_nbytes(self) -> int:
        return SAMPLE_HEADER_SIZE + self.payload_nbytes

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def canonical(self) -> str:
        parts = []
        for f in self.fields:
            shape = ",".join(str(d) for d in f.shape)
            parts.append(f"{f.name}:{f.dtype}:[{shape}]:{f.max_bytes}")
        return ";".join(parts)

    @property
    def schema_hash(self) -> int:
        digest = hashlib.sha256(self.canonical().encode()).digest()
        return int.from_bytes(digest[:8], "little")

    def to_json(self) -> list[dict]:
        return [
            {"name": f.name, "dtype": f.dtype, "shape": list(f.shape), "max_bytes": f.max_bytes}
            for f in self.fields
        ]

    @classmethod
    def from_json(cls, spec: Iterable[Mapping]) -> "SchemaDescriptor":
        return cls(tuple(
            FieldSpec(s["name"], s["dtype"], tuple(s["shape"]), s.get("max_bytes", 0))
            for s in spec
        ))


def _infer_field(name: str, value: Any) -> FieldSpec:
    if isinstance(value, str):
        encoded = len(value.encode("utf-8"))
        return FieldSpec(name, "utf8", (), max_bytes=max(256, 2 * encoded))
    if isinstance(value, (bytes, bytearray, memoryview)):
        return FieldSpec(name, "u8", (len(value),))
    if isinstance(value, bool):
        return FieldSpec(name, "i64", ())
    if isinstance(value, (int, np.integer)):
        return FieldSpec(name, "i64", ())
    if isinstance(value, (float, np.floating)):
        return FieldSpec(name, "f64", ())
    if isinstance(value, (list, tuple, np.ndarray)):
        try:
            arr = np.asarray(value)
        except ValueError as exc:
            raise UnsupportedValue(f"field {name!r}: {exc}") from exc
        if arr.dtype == object:
            raise UnsupportedValue(f"field {name!r} has ragged or non-numeric entries")
        if arr.dtype.kind == "f":
            dtype = "f64"
        elif arr.dtype.kind == "u" and arr.dtype.itemsize == 1:
            dtype = "u8"
        elif arr.dtype.kind in ("i", "u", "b"):
            dtype = "i64"
        else:
            raise UnsupportedValue(f"field {name!r} has unsupported dtype {arr.dtype}")
        if arr.ndim == 0:
            return FieldSpec(name, dtype, ())
        return FieldSpec(name, dtype, arr.shape)
    raise UnsupportedValue(f"field {name!r} has unsupported type {type(value).__name__}")


def infer_schema(example: Mapping[str, Any]) -> SchemaDescriptor:
    """Build a descriptor from one example payload.

    Field order is lexicographic by name so the inferred layout is
    deterministic regardless of dict insertion order. Floats (any width)
    map to f64, ints to i64, uint8 arrays stay u8, strings get a padded
    utf8 slot of at least 256 bytes.
    """
    if not isinstance(example, Mapping):
        raise UnsupportedValue(f"example payload must be a mapping, got {type(example).__name__}")
    if not example:
        raise EmptyExample("example payload has no fields")
    return SchemaDescriptor(tuple(
        _infer_field(name, example[name]) for name in sorted(example)
    ))


def conform(schema: SchemaDescriptor, payload: Mapping[str, Any]) -> dict[str, Any]:
    """Validate ``payload`` against ``schema`` and return its canonical form.

    Canonical form: f64/i64 scalars as float/int, arrays as little-endian
    C-contiguous ndarrays of the exact dtype and shape, strings as str.
    Raises SchemaMismatch on key or shape disagreement.
    """
    keys = set(payload)
    names = set(schema.field_names)
    if keys != names:
        missing = sorted(names - keys)
        extra = sorted(keys - names)
        raise SchemaMismatch(f"payload keys differ from schema (missing={missing}, extra={extra})")
    out: dict[str, Any] = {}
    for f in schema.fields:
        value = payload[f.name]
        if f.dtype == "utf8":
            if not isinstance(value, str):
                raise SchemaMismatch(f"field {f.name!r} must be str, got {type(value).__name__}")
            if len(value.encode("utf-8")) > f.max_bytes:
                raise SchemaMismatch(f"field {f.name!r} exceeds max_bytes={f.max_bytes}")
            out[f.name] = value
            continue
        dtype = _NUMERIC[f.dtype]
        if f.shape == ():
            try:
                out[f.name] = float(value) if f.dtype == "f64" else int(value)
            except (TypeError, ValueError) as exc:
                raise SchemaMismatch(f"field {f.name!r}: {exc}") from exc
            continue
        if isinstance(value, (bytes, bytearray, memoryview)):
            arr = np.frombuffer(value, dtype=dtype)
            if arr.size != int(np.prod(f.shape)):
                raise SchemaMismatch(
                    f"field {f.name!r} has {arr.size} elements, schema wants {f.shape}")
            arr = arr.reshape(f.shape)
        else:
            arr = np.asarray(value)
        if arr.shape != f.shape:
            raise SchemaMismatch(f"field {f.name!r} shape {arr.shape} != schema {f.shape}")
        out[f.name] = np.ascontiguousarray(arr, dtype=dtype)
    return out


def encode_into(schema: SchemaDescriptor, payload: Mapping[str, Any],
                buf, offset: int = 0) -> None:
    """Pack conformed payload fields directly into ``buf`` at ``offset``.

    ``buf`` is any writable buffer (bytearray, shared-memory view). No
    allocation proportional to the payload size takes place for numeric
    fields; array data is copied straight into the destination view.
    """
    for f, foff in zip(schema.fields, schema._offsets):
        pos = offset + foff
        value = payload[f.name]
        if f.dtype == "utf8":
            raw = value.encode("utf-8")
            struct.pack_into("<I", buf, pos, len(raw))
            region = memoryview(buf)[pos + 4:pos + 4 + f.max_bytes]
            region[:len(raw)] = raw
            if len(raw) < f.max_bytes:
                region[len(raw):] = bytes(f.max_bytes - len(raw))
        elif f.shape == ():
            struct.pack_into("<d" if f.dtype == "f64" else "<q", buf, pos, value)
        else:
            dest = np.frombuffer(buf, dtype=_NUMERIC[f.dtype],
                                 count=value.size, offset=pos).reshape(f.shape)
            np.copyto(dest, value)


def decode_payload(schema: SchemaDescriptor, buf, offset: int = 0) -> dict[str, Any]:
    """Unpack packed fields at ``offset`` into a canonical payload dict."""
    out: dict[str, Any] = {}
    for f, foff in zip(schema.fields, schema._offsets):
        pos = offset + foff
        if f.dtype == "utf8":
            (length,) = struct.unpack_from("<I", buf, pos)
            if length > f.max_bytes:
                raise SchemaMismatch(f"field {f.name!r} carries length {length} > max_bytes")
            raw = bytes(memoryview(buf)[pos + 4:pos + 4 + length])
            out[f.name] = raw.decode("utf-8")
        elif f.shape == ():
            (value,) = struct.unpack_from("<d" if f.dtype == "f64" else "<q", buf, pos)
            out[f.name] = value
        else:
            arr = np.frombuffer(buf, dtype=_NUMERIC[f.dtype],
                                count=int(np.prod(f.shape)), offset=pos)
            out[f.name] = arr.reshape(f.shape).copy()
    return out


def encode_sample(schema: SchemaDescriptor, ts_ns: int,
                  payload: Mapping[str, Any]) -> bytes:
    """Allocate and return a full sample (header + packed payload)."""
    global ENCODE_ALLOCS
    ENCODE_ALLOCS += 1
    buf = bytearray(schema.sample_nbytes)
    SAMPLE_HEADER.pack_into(buf, 0, SAMPLE_MAGIC, schema.schema_hash, ts_ns)
    encode_into(schema, payload, buf, SAMPLE_HEADER_SIZE)
    return bytes(buf)


def write_sample_header(schema: SchemaDescriptor, ts_ns: int, buf, offset: int = 0) -> None:
    SAMPLE_HEADER.pack_into(buf, offset, SAMPLE_MAGIC, schema.schema_hash, ts_ns)


def read_sample_header(buf, offset: int = 0) -> tuple[int, int]:
    """Return (schema_hash, ts_ns); raises SchemaMismatch on bad magic."""
    magic, schema_hash, ts_ns = SAMPLE_HEADER.unpack_from(buf, offset)
    if magic != SAMPLE_MAGIC:
        raise SchemaMismatch(f"bad sample magic {magic!r}")
    return schema_hash, ts_ns


def decode_sample(schema: SchemaDescriptor, buf, offset: int = 0) -> tuple[int, dict]:
    """Return (ts_ns, payload) from a full sample at ``offset``."""
    schema_hash, ts_ns = read_sample_header(buf, offset)
    if schema_hash != schema.schema_hash:
        raise SchemaMismatch(
            f"sample schema hash {schema_hash:#x} != descriptor {schema.schema_hash:#x}")
    return ts_ns, decode_payload(schema, buf, offset + SAMPLE_HEADER_SIZE)


def payload_equal(a: Mapping[str, Any], b: Mapping[str, Any]) -> bool:
    """Bit-exact payload comparison (NaN-safe for float arrays)."""
    if set(a) != set(b):
        return False
    for key, va in a.items():
        vb = b[key]
        if isinstance(va, np.ndarray) or isinstance(vb, np.ndarray):
            va, vb = np.asarray(va), np.asarray(vb)
            if va.shape != vb.shape or va.dtype != vb.dtype or va.tobytes() != vb.tobytes():
                return False
        elif isinstance(va, float) and isinstance(vb, float):
            if struct.pack("<d", va) != struct.pack("<d", vb):
                return False
        elif va != vb:
            return False
    return True
