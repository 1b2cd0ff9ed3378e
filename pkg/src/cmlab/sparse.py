"""Sparse parameter-difference vectors ("update matrices") and their algebra.

File format (UTF-8 text)::

    CMLSPARSE 1
    fingerprint <hex>
    scope <encoder|full>
    count <n>
    <name>\\t<flat index>\\t<delta as float.hex()>     (n lines, sorted)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import IncompatibleUpdates, InputError, StaleBaseError
from .params import NamedParamStore, Snapshot

SPARSE_MAGIC = "CMLSPARSE 1"
ENCODER = "encoder"
FULL = "full"


@dataclass(frozen=True)
class SparseUpdate:
    """Sorted, coordinate-unique, non-zero parameter differences."""

    base_fingerprint: str
    names: tuple[str, ...] = ()
    indices: tuple[int, ...] = ()
    deltas: tuple[float, ...] = ()
    scope: str = FULL
    budget: int | None = None

    def __post_init__(self):
        if not (len(self.names) == len(self.indices) == len(self.deltas)):
            raise InputError("names, indices and deltas must have equal length")
        keys = list(zip(self.names, self.indices))
        if keys != sorted(keys) or len(set(keys)) != len(keys):
            raise InputError("entries must be sorted and unique per coordinate")
        if any(d == 0 or not math.isfinite(d) for d in self.deltas):
            raise InputError("deltas must be finite and non-zero")
        if self.budget is not None and len(keys) > self.budget:
            raise InputError(f"{len(keys)} entries exceed the sparsity budget {self.budget}")

    @classmethod
    def from_entries(cls, base_fingerprint: str, entries: Mapping[tuple[str, int], float] | Iterable,
                     scope: str = FULL, budget: int | None = None) -> "SparseUpdate":
        items = entries.items() if isinstance(entries, Mapping) else entries
        clean = sorted(((str(n), int(i)), float(d)) for (n, i), d in items if d != 0)
        return cls(base_fingerprint,
                   tuple(k[0] for k, _ in clean), tuple(k[1] for k, _ in clean),
                   tuple(d for _, d in clean), scope, budget)

    @classmethod
    def from_dense(cls, base_fingerprint: str, deltas: Mapping[str, np.ndarray],
                   scope: str = FULL, budget: int | None = None) -> "SparseUpdate":
        entries = []
        for name in sorted(deltas):
            flat = np.asarray(deltas[name]).ravel()
            for idx in np.flatnonzero(flat):
                entries.append(((name, int(idx)), float(flat[idx])))
        return cls.from_entries(base_fingerprint, entries, scope, budget)

    def __len__(self) -> int:
        return len(self.deltas)

    def entries(self) -> dict[tuple[str, int], float]:
        return {(n, i): d for n, i, d in zip(self.names, self.indices, self.deltas)}

    def __neg__(self) -> "SparseUpdate":
        return SparseUpdate(self.base_fingerprint, self.names, self.indices,
                            tuple(-d for d in self.deltas), self.scope, self.budget)

    def __add__(self, other: "SparseUpdate") -> "SparseUpdate":
        return compose_sparse_updates([self, other])

    def by_parameter(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out: dict[str, tuple[list[int], list[float]]] = {}
        for n, i, d in zip(self.names, self.indices, self.deltas):
            idx, val = out.setdefault(n, ([], []))
            idx.append(i)
            val.append(d)
        return {n: (np.array(i, dtype=np.int64), np.array(v)) for n, (i, v) in out.items()}


def compose_sparse_updates(updates: Iterable[SparseUpdate]) -> SparseUpdate:
    """Coordinate-wise sum; exactly rounded (``math.fsum``) so order never matters."""
    updates = list(updates)
    if not updates:
        raise InputError("nothing to compose")
    fps = {u.base_fingerprint for u in updates}
    if len(fps) != 1:
        raise IncompatibleUpdates("sparse updates were taken against different base fingerprints")
    parts: dict[tuple[str, int], list[float]] = {}
    for u in updates:
        for n, i, d in zip(u.names, u.indices, u.deltas):
            parts.setdefault((n, i), []).append(d)
    summed = {k: math.fsum(v) for k, v in parts.items()}
    scope = FULL if any(u.scope == FULL for u in updates) else updates[0].scope
    return SparseUpdate.from_entries(updates[0].base_fingerprint, summed, scope)


@dataclass
class AppliedUpdate:
    """Handle returned by :func:`apply_sparse_update`; reverting it is exact.

    Coordinates still holding the value written at apply time are restored
    to their saved originals bitwise; coordinates changed afterwards (e.g.
    by training) have the delta subtracted.
    """

    update: SparseUpdate
    originals: dict[str, np.ndarray] = field(default_factory=dict)
    written: dict[str, np.ndarray] = field(default_factory=dict)
    reverted: bool = False


def _check_coords(store: NamedParamStore, name: str, idx: np.ndarray) -> None:
    if name not in store:
        raise InputError(f"sparse update touches unknown parameter {name!r}")
    if idx.size and idx.max() >= store[name].size:
        raise InputError(f"sparse update index out of range for {name!r}")


def apply_sparse_update(store: NamedParamStore, u: SparseUpdate, force: bool = False) -> AppliedUpdate:
    """``theta[c] += delta`` for every entry.

    The store must match the update's base fingerprint unless ``force``.
    """
    if not force and store.fingerprint() != u.base_fingerprint:
        raise StaleBaseError("store does not match the update's base fingerprint")
    handle = AppliedUpdate(u)
    for name, (idx, val) in u.by_parameter().items():
        _check_coords(store, name, idx)
        flat = store[name].ravel().copy()
        handle.originals[name] = flat[idx].copy()
        flat[idx] += val
        handle.written[name] = flat[idx].copy()
        store.assign(name, flat.reshape(store[name].shape))
    return handle


def revert_sparse_update(store: NamedParamStore, applied: AppliedUpdate | SparseUpdate) -> None:
    """Undo an application; a bare SparseUpdate is subtracted."""
    if isinstance(applied, SparseUpdate):
        for name, (idx, val) in applied.by_parameter().items():
            _check_coords(store, name, idx)
            flat = store[name].ravel().copy()
            flat[idx] -= val
            store.assign(name, flat.reshape(store[name].shape))
        return
    if applied.reverted:
        raise InputError("update already reverted")
    for name, (idx, val) in applied.update.by_parameter().items():
        flat = store[name].ravel().copy()
        current = flat[idx]
        untouched = current == applied.written[name]
        flat[idx] = np.where(untouched, applied.originals[name], current - val)
        store.assign(name, flat.reshape(store[name].shape))
    applied.reverted = True


def diff_to_update(store: NamedParamStore, snap: Snapshot, names: Iterable[str], scope: str = FULL,
                   budget: int | None = None, base_fingerprint: str | None = None) -> SparseUpdate:
    """Sparse difference of ``names`` between the store and a snapshot."""
    deltas = {n: store[n] - snap.arrays[n] for n in names}
    return SparseUpdate.from_dense(base_fingerprint or snap.fingerprint, deltas, scope, budget)


def format_sparse_update(u: SparseUpdate) -> str:
    lines = [SPARSE_MAGIC, f"fingerprint {u.base_fingerprint}", f"scope {u.scope}", f"count {len(u)}"]
    lines += [f"{n}\t{i}\t{float(d).hex()}" for n, i, d in zip(u.names, u.indices, u.deltas)]
    return "\n".join(lines) + "\n"


def parse_sparse_update(text: str) -> SparseUpdate:
    lines = text.splitlines()
    if not lines or lines[0] != SPARSE_MAGIC:
        raise InputError("not a sparse update file (bad magic)")
    header = {}
    for line in lines[1:4]:
        key, _, value = line.partition(" ")
        header[key] = value
    count = int(header["count"])
    records = [ln.split("\t") for ln in lines[4:4 + count]]
    if len(records) != count:
        raise InputError("truncated sparse update file")
    entries = [((n, int(i)), float.fromhex(d)) for n, i, d in records]
    return SparseUpdate.from_entries(header["fingerprint"], entries, header["scope"])


def save_sparse_update(u: SparseUpdate, path) -> None:
    from .artifacts import atomic_write_text

    atomic_write_text(Path(path), format_sparse_update(u))


def load_sparse_update(path) -> SparseUpdate:
    return parse_sparse_update(Path(path).read_text())
