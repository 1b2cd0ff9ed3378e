"""Named, group-tagged parameter storage with snapshots and serialization.

Binary store format (little-endian), version 1::

    magic      8 bytes  b"CMLPARM1"
    count      u32      number of records
    record*    u32 name_len, name (utf-8)
               u32 tag_len,  tag  (utf-8, see ParamGroup.tag)
               u32 ndim, u32[ndim] shape
               f64[prod(shape)] values, row-major

Records are written in lexicographic name order.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from .errors import IncompatibleSnapshot, InputError
from .tensor import Tensor, backward_pass

STORE_MAGIC = b"CMLPARM1"

BASE = "base"
ADAPTER = "adapter"
HEAD = "head"
LAYERNORM = "layernorm"
KINDS = (BASE, ADAPTER, HEAD, LAYERNORM)


@dataclass(frozen=True, order=True)
class ParamGroup:
    """Trainability group of a parameter; adapters carry their language id."""

    kind: str
    language: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown parameter group kind {self.kind!r}")
        if (self.kind == ADAPTER) != (self.language is not None):
            raise InputError("exactly the adapter group carries a language id")

    @property
    def tag(self) -> str:
        return f"{self.kind}:{self.language}" if self.language is not None else self.kind

    @classmethod
    def from_tag(cls, tag: str) -> "ParamGroup":
        kind, _, lang = tag.partition(":")
        return cls(kind, lang or None)

    @classmethod
    def adapter(cls, language: str) -> "ParamGroup":
        return cls(ADAPTER, language)


Base = ParamGroup(BASE)
Head = ParamGroup(HEAD)
LayerNorm = ParamGroup(LAYERNORM)


def group_matcher(groups) -> Callable[[ParamGroup], bool]:
    """Turn a group filter into a predicate.

    Accepts None (everything), a kind string (``"adapter"`` matches every
    language), a ParamGroup (exact), an iterable of those, or a predicate.
    """
    if groups is None:
        return lambda g: True
    if callable(groups) and not isinstance(groups, ParamGroup):
        return groups
    if isinstance(groups, (str, ParamGroup)):
        groups = [groups]
    kinds = {g for g in groups if isinstance(g, str)}
    exact = {g for g in groups if isinstance(g, ParamGroup)}
    return lambda g: g.kind in kinds or g in exact


class NamedParamStore:
    """Mapping of parameter name to (read-only array, group).

    Arrays handed out are read-only; every mutation goes through
    :meth:`add`, :meth:`assign` or :meth:`remove` and bumps ``version``.
    """

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._groups: dict[str, ParamGroup] = {}
        self.version = 0

    # -- mutation ---------------------------------------------------------
    def add(self, name: str, value, group: ParamGroup) -> None:
        if name in self._arrays:
            raise InputError(f"duplicate parameter name {name!r}")
        self._arrays[name] = _frozen_copy(value)
        self._groups[name] = group
        self.version += 1

    def assign(self, name: str, value) -> None:
        old = self._arrays[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise InputError(f"shape mismatch for {name}: {value.shape} != {old.shape}")
        self._arrays[name] = _frozen_copy(value)
        self.version += 1

    def remove(self, name: str) -> None:
        del self._arrays[name]
        del self._groups[name]
        self.version += 1

    # -- access -----------------------------------------------------------
    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self, groups=None) -> list[str]:
        match = group_matcher(groups)
        return sorted(n for n, g in self._groups.items() if match(g))

    def group(self, name: str) -> ParamGroup:
        return self._groups[name]

    def items(self, groups=None) -> Iterator[tuple[str, np.ndarray, ParamGroup]]:
        for n in self.names(groups):
            yield n, self._arrays[n], self._groups[n]

    def size(self, groups=None) -> int:
        return sum(self._arrays[n].size for n in self.names(groups))

    def leaf(self, name: str) -> Tensor:
        return Tensor.param(name, self._arrays[name])

    def copy(self) -> "NamedParamStore":
        other = NamedParamStore()
        other._arrays = dict(self._arrays)  # arrays are immutable, sharing is safe
        other._groups = dict(self._groups)
        other.version = self.version
        return other

    def fingerprint(self, groups=None) -> str:
        h = hashlib.sha256()
        for name, arr, group in self.items(groups):
            h.update(name.encode())
            h.update(b"\0" + group.tag.encode() + b"\0")
            h.update(np.asarray(arr.shape, dtype="<u8").tobytes())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def _frozen_copy(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Snapshot:
    arrays: Mapping[str, np.ndarray]
    groups: Mapping[str, ParamGroup]
    fingerprint: str


def snapshot_params(store: NamedParamStore) -> Snapshot:
    arrays = {n: store[n] for n in store.names()}  # already read-only
    groups = {n: store.group(n) for n in store.names()}
    return Snapshot(arrays, groups, store.fingerprint())


def restore_params(store: NamedParamStore, snap: Snapshot) -> None:
    """Make ``store`` hold exactly the snapshot's entries."""
    for name in store.names():
        if name not in snap.arrays:
            store.remove(name)
    for name in sorted(snap.arrays):
        if name in store:
            if store.group(name) != snap.groups[name] or store[name].shape != snap.arrays[name].shape:
                store.remove(name)
                store.add(name, snap.arrays[name], snap.groups[name])
            elif store[name].tobytes() != snap.arrays[name].tobytes():
                store.assign(name, snap.arrays[name])
        else:
            store.add(name, snap.arrays[name], snap.groups[name])


def param_delta(store: NamedParamStore, snap: Snapshot, groups=None) -> dict[str, np.ndarray]:
    """``current - snapshot`` for every parameter matching ``groups``."""
    names = store.names(groups)
    out = {}
    for name in names:
        if name not in snap.arrays:
            raise IncompatibleSnapshot(f"parameter {name!r} missing from snapshot")
        ref = snap.arrays[name]
        if ref.shape != store[name].shape:
            raise IncompatibleSnapshot(f"shape mismatch for {name!r}: {store[name].shape} vs {ref.shape}")
        out[name] = store[name] - ref
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FDResult:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


def finite_difference_check(store: NamedParamStore, loss_fn: Callable[[NamedParamStore], Tensor],
                            sample: Iterable[tuple[str, int]], h: float = 1e-5) -> list[FDResult]:
    """Compare backprop gradients against central differences at ``sample`` coordinates."""
    grads = backward_pass(loss_fn(store))
    results = []
    for name, index in sample:
        original = store[name]
        flat = original.ravel().copy()
        x0 = flat[index]
        flat[index] = x0 + h
        store.assign(name, flat.reshape(original.shape))
        up = float(loss_fn(store).data)
        flat[index] = x0 - h
        store.assign(name, flat.reshape(original.shape))
        down = float(loss_fn(store).data)
        store.assign(name, original)
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name].ravel()[index]) if name in grads else 0.0
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        results.append(FDResult(name, int(index), analytic, numeric, rel))
    return results


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _write_str(buf, s: str) -> None:
    b = s.encode()
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _read_str(buf) -> str:
    (n,) = struct.unpack("<I", buf.read(4))
    return buf.read(n).decode()


def dump_store(store: NamedParamStore) -> bytes:
    buf = io.BytesIO()
    buf.write(STORE_MAGIC)
    buf.write(struct.pack("<I", len(store)))
    for name, arr, group in store.items():
        _write_str(buf, name)
        _write_str(buf, group.tag)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def load_store_bytes(data: bytes) -> NamedParamStore:
    buf = io.BytesIO(data)
    if buf.read(len(STORE_MAGIC)) != STORE_MAGIC:
        raise InputError("not a parameter store file (bad magic)")
    (count,) = struct.unpack("<I", buf.read(4))
    store = NamedParamStore()
    for _ in range(count):
        name = _read_str(buf)
        group = ParamGroup.from_tag(_read_str(buf))
        (ndim,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape)
        store.add(name, values, group)
    return store


def save_store(store: NamedParamStore, path) -> None:
    from .artifacts import atomic_write_bytes

    atomic_write_bytes(Path(path), dump_store(store))


def load_store(path) -> NamedParamStore:
    return load_store_bytes(Path(path).read_bytes())
