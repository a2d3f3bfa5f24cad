"""Named-tensor checkpoints and their on-disk container.

The container is the safetensors layout restricted to dense F32/F16 tensors:
an 8-byte little-endian header length, a JSON header, then the raw payload.
Everything is materialized as float32 on load.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import (
    DuplicateTensorName,
    IoFailure,
    MalformedContainer,
    NonFiniteWeights,
)

METADATA_KEY = "__metadata__"
_DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}


def _as_tensor(name, value) -> np.ndarray:
    arr = np.array(value, dtype=np.float32, copy=True)
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"tensor {name!r} has a non-positive dimension: {arr.shape}")
    arr.setflags(write=False)
    return arr


class Checkpoint(Mapping[str, np.ndarray]):
    """Immutable, lexicographically ordered map of tensor name to float32 array."""

    def __init__(self, tensors: Mapping[str, object], metadata: Mapping[str, str] | None = None):
        items = {}
        for name, value in tensors.items():
            if not isinstance(name, str) or not name:
                raise ValueError("tensor names must be non-empty strings")
            if name == METADATA_KEY:
                raise ValueError(f"{METADATA_KEY!r} is reserved")
            items[name] = _as_tensor(name, value)
        bad = [n for n, a in items.items() if not np.all(np.isfinite(a))]
        if bad:
            raise NonFiniteWeights(bad)
        self._tensors = {n: items[n] for n in sorted(items)}
        meta = dict(metadata or {})
        for k, v in meta.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValueError("metadata must map strings to strings")
        self.metadata = {k: meta[k] for k in sorted(meta)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.metadata == other.metadata and self.same_tensors(other)

    __hash__ = None

    def same_tensors(self, other: "Checkpoint") -> bool:
        """Bitwise equality of tensor names, shapes and values (metadata ignored)."""
        if list(self) != list(other):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.values(), other.values())
        )

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: a.shape for n, a in self._tensors.items()}

    def with_metadata(self, **updates: str) -> "Checkpoint":
        return Checkpoint(self._tensors, {**self.metadata, **updates})

    def __repr__(self):
        inner = ", ".join(f"{n}{list(a.shape)}" for n, a in self._tensors.items())
        return f"Checkpoint({inner})"


@dataclass(frozen=True)
class Mismatch:
    name: str
    kind: str  # "missing" | "shape" | "extra"
    details: str


@dataclass(frozen=True)
class CompatReport:
    mismatches: list[Mismatch] = field(default_factory=list)

    @property
    def compatible(self) -> bool:
        return not self.mismatches


def validate_compatibility(checkpoints: Iterable[Checkpoint]) -> CompatReport:
    """Compare every checkpoint against the first one by name set and shapes.

    ``missing`` means a later checkpoint lacks a tensor the first has, ``extra``
    the reverse.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("validate_compatibility needs at least one checkpoint")
    ref = checkpoints[0].shapes()
    mismatches = []
    for i, ck in enumerate(checkpoints[1:], start=1):
        shapes = ck.shapes()
        for name in sorted(set(ref) | set(shapes)):
            if name not in shapes:
                mismatches.append(Mismatch(name, "missing", f"absent from checkpoint {i}"))
            elif name not in ref:
                mismatches.append(Mismatch(name, "extra", f"only in checkpoint {i}"))
            elif ref[name] != shapes[name]:
                mismatches.append(
                    Mismatch(name, "shape", f"{list(ref[name])} vs {list(shapes[name])} in checkpoint {i}")
                )
    return CompatReport(mismatches)


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateTensorName(f"duplicate key in container header: {key!r}")
        out[key] = value
    return out


def _parse_header(raw: bytes) -> dict:
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedContainer(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedContainer("header must be a JSON object")
    return header


def decode_container(blob: bytes) -> Checkpoint:
    if len(blob) < 8:
        raise MalformedContainer(f"container too short ({len(blob)} bytes)")
    (n,) = struct.unpack("<Q", blob[:8])
    if n > len(blob) - 8:
        raise MalformedContainer(f"header length {n} exceeds file size")
    header = _parse_header(blob[8 : 8 + n])
    payload = memoryview(blob)[8 + n :]

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedContainer("__metadata__ must map strings to strings")

    tensors = {}
    spans = []
    for name, info in header.items():
        if not name:
            raise MalformedContainer("empty tensor name")
        try:
            dtype = _DTYPES[info["dtype"]]
            shape = [int(d) for d in info["shape"]]
            begin, end = (int(x) for x in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise MalformedContainer(f"bad header entry for {name!r}: {info!r}") from None
        if any(d <= 0 for d in shape):
            raise MalformedContainer(f"{name!r}: non-positive dimension in {shape}")
        expected = math.prod(shape) * dtype.itemsize
        if not 0 <= begin <= end <= len(payload):
            raise MalformedContainer(f"{name!r}: offsets [{begin}, {end}) outside payload of {len(payload)} bytes")
        if end - begin != expected:
            raise MalformedContainer(
                f"{name!r}: shape {shape} needs {expected} bytes, offsets span {end - begin}"
            )
        spans.append((begin, end, name))
        arr = np.frombuffer(payload[begin:end], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(np.float32)

    # Payload must be tiled exactly: no holes, overlaps or trailing bytes.
    cursor = 0
    for begin, end, name in sorted(spans):
        if begin != cursor:
            raise MalformedContainer(f"{name!r}: payload gap or overlap at byte {cursor}")
        cursor = end
    if cursor != len(payload):
        raise MalformedContainer(f"payload has {len(payload) - cursor} unaccounted bytes")

    return Checkpoint(tensors, metadata)


def encode_container(checkpoint: Checkpoint) -> bytes:
    header = {}
    chunks = []
    offset = 0
    for name, arr in checkpoint.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + len(data)]}
        chunks.append(data)
        offset += len(data)
    if checkpoint.metadata:
        header[METADATA_KEY] = dict(checkpoint.metadata)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    return struct.pack("<Q", len(raw)) + raw + b"".join(chunks)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_container(blob)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    blob = encode_container(checkpoint)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
