"""Model-weight containers, sample-weighted aggregation, and the FTM1 wire encoding.

A TensorMap is the unit of weight exchange: an ordered list of named float32
tensors. Values are immutable after construction, always finite, and encode
bit-exactly, which is what lets the fault-injection tests demand bit-identical
global models across interrupted and uninterrupted runs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    EmptyUpdateSet,
    MalformedEncoding,
    NonFiniteInput,
    StructureMismatch,
)

MAGIC = b"FTM1"

_MAX_NAME_BYTES = 0xFFFF
_MAX_RANK = 0xFF
_MAX_DIM = 0xFFFFFFFF


class TensorMap:
    """Ordered, immutable collection of named float32 tensors."""

    __slots__ = ("_names", "_shapes", "_arrays", "_index")

    def __init__(self, entries: Iterable[tuple[str, Sequence[int], Sequence[float]]]):
        names: list[str] = []
        shapes: list[tuple[int, ...]] = []
        arrays: list[np.ndarray] = []
        for name, shape, data in entries:
            if not isinstance(name, str) or not name:
                raise ValueError("entry names must be nonempty strings")
            if len(name.encode("utf-8")) > _MAX_NAME_BYTES:
                raise ValueError(f"entry name too long: {name[:32]}...")
            shape = tuple(int(d) for d in shape)
            if len(shape) > _MAX_RANK:
                raise ValueError(f"entry {name!r}: rank {len(shape)} exceeds {_MAX_RANK}")
            if any(d < 1 or d > _MAX_DIM for d in shape):
                raise ValueError(f"entry {name!r}: dimensions must be in [1, {_MAX_DIM}]")
            with np.errstate(over="ignore"):
                flat = np.asarray(data, dtype=np.float32).reshape(-1)
            if flat.size != math.prod(shape):
                raise ValueError(
                    f"entry {name!r}: shape {shape} implies {math.prod(shape)} values, got {flat.size}"
                )
            if not np.isfinite(flat).all():
                raise NonFiniteInput(f"entry {name!r} contains NaN or infinity")
            flat = flat.copy()
            flat.flags.writeable = False
            names.append(name)
            shapes.append(shape)
            arrays.append(flat)
        if len(set(names)) != len(names):
            raise ValueError("entry names must be unique")
        self._names = tuple(names)
        self._shapes = tuple(shapes)
        self._arrays = tuple(arrays)
        self._index = {n: i for i, n in enumerate(names)}

    @classmethod
    def from_arrays(cls, pairs: Iterable[tuple[str, np.ndarray]]) -> "TensorMap":
        """Build from (name, ndarray) pairs, taking shapes from the arrays."""
        return cls((name, np.shape(arr), np.asarray(arr).reshape(-1)) for name, arr in pairs)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[self._index[name]]

    def array(self, name: str) -> np.ndarray:
        """Read-only float32 view of one entry, reshaped to its declared shape."""
        i = self._index[name]
        return self._arrays[i].reshape(self._shapes[i])

    def entries(self) -> Iterator[tuple[str, tuple[int, ...], np.ndarray]]:
        """Yield (name, shape, flat float32 data) in map order."""
        return iter(zip(self._names, self._shapes, self._arrays))

    def structure(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        """Names and shapes in order; the key for structural compatibility."""
        return tuple(zip(self._names, self._shapes))

    def num_values(self) -> int:
        return sum(a.size for a in self._arrays)

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other: object) -> bool:
        """Bit-exact equality: same names, shapes, and float32 bit patterns."""
        if not isinstance(other, TensorMap):
            return NotImplemented
        if self.structure() != other.structure():
            return False
        return all(
            a.tobytes() == b.tobytes() for a, b in zip(self._arrays, other._arrays)
        )

    def __hash__(self) -> int:
        return hash((self.structure(), tuple(a.tobytes() for a in self._arrays)))

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}{list(s)}" for n, s in zip(self._names, self._shapes))
        return f"TensorMap({inner})"


@dataclass(frozen=True)
class WeightedUpdate:
    """One node's trained weights plus the sample count that weights them."""

    weights: TensorMap
    sample_count: int
    node_id: str

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")


def _check_same_structure(reference: TensorMap, other: TensorMap, label: str) -> None:
    if reference.structure() != other.structure():
        raise StructureMismatch(
            f"{label}: structures differ ({reference.structure()} vs {other.structure()})"
        )


def aggregate(updates: Iterable[WeightedUpdate]) -> TensorMap:
    """Sample-count-weighted mean of the updates' weights.

    Updates are combined in ascending node_id order with float64 accumulation,
    each coordinate rounded to float32 once at the end. Coefficients are the
    exact float64 quotients n_k / N, so scaling every sample count by the same
    integer leaves the result bit-identical, and a single update passes
    through unchanged.
    """
    ordered = sorted(updates, key=lambda u: u.node_id)
    if not ordered:
        raise EmptyUpdateSet("no updates to aggregate")
    reference = ordered[0].weights
    for update in ordered[1:]:
        _check_same_structure(reference, update.weights, f"update from {update.node_id!r}")
    total = sum(u.sample_count for u in ordered)
    accumulators = [np.zeros(arr.size, dtype=np.float64) for _, _, arr in reference.entries()]
    for update in ordered:
        coeff = np.float64(update.sample_count) / np.float64(total)
        for acc, (_, _, flat) in zip(accumulators, update.weights.entries()):
            acc += coeff * flat.astype(np.float64)
    return TensorMap(
        (name, shape, acc.astype(np.float32))
        for (name, shape, _), acc in zip(reference.entries(), accumulators)
    )


def serialize(t: TensorMap) -> bytes:
    """Encode to the FTM1 byte layout (see PROTOCOL.md)."""
    out = bytearray(MAGIC)
    out += struct.pack(">I", len(t))
    for name, shape, flat in t.entries():
        name_bytes = name.encode("utf-8")
        out += struct.pack(">H", len(name_bytes))
        out += name_bytes
        out += struct.pack("B", len(shape))
        if shape:
            out += struct.pack(f">{len(shape)}I", *shape)
        out += flat.astype("<f4", copy=False).tobytes()
    return bytes(out)


class _Cursor:
    """Byte reader that raises MalformedEncoding on truncation."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise MalformedEncoding(
                f"truncated: wanted {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def remaining(self) -> int:
        return len(self.data) - self.pos


def deserialize(raw: bytes) -> TensorMap:
    """Decode an FTM1 byte sequence; inverse of serialize, bit-exact."""
    cur = _Cursor(bytes(raw))
    if cur.take(4) != MAGIC:
        raise MalformedEncoding("bad magic bytes")
    (count,) = struct.unpack(">I", cur.take(4))
    entries = []
    seen: set[str] = set()
    for _ in range(count):
        (name_len,) = struct.unpack(">H", cur.take(2))
        if name_len == 0:
            raise MalformedEncoding("empty entry name")
        try:
            name = cur.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedEncoding(f"entry name is not valid UTF-8: {exc}") from exc
        if name in seen:
            raise MalformedEncoding(f"duplicate entry name {name!r}")
        seen.add(name)
        (rank,) = struct.unpack("B", cur.take(1))
        shape = struct.unpack(f">{rank}I", cur.take(4 * rank)) if rank else ()
        if any(d == 0 for d in shape):
            raise MalformedEncoding(f"entry {name!r}: zero dimension")
        size = math.prod(shape)
        if size * 4 > cur.remaining():
            raise MalformedEncoding(
                f"entry {name!r}: {size} values declared but only {cur.remaining()} bytes left"
            )
        flat = np.frombuffer(cur.take(size * 4), dtype="<f4").astype(np.float32)
        if not np.isfinite(flat).all():
            raise MalformedEncoding(f"entry {name!r}: non-finite payload")
        entries.append((name, shape, flat))
    if cur.remaining():
        raise MalformedEncoding(f"{cur.remaining()} trailing bytes after last entry")
    return TensorMap(entries)


def l2_distance(a: TensorMap, b: TensorMap) -> float:
    """Euclidean distance over all coordinates of two structurally equal maps."""
    _check_same_structure(a, b, "l2_distance")
    total = 0.0
    for (_, _, fa), (_, _, fb) in zip(a.entries(), b.entries()):
        diff = fa.astype(np.float64) - fb.astype(np.float64)
        total += float(np.dot(diff, diff))
    return math.sqrt(total)
