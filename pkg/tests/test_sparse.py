import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmlab.errors import IncompatibleUpdates, InputError, StaleBaseError
from cmlab.params import Base, NamedParamStore, snapshot_params
from cmlab.sparse import (SparseUpdate, apply_sparse_update, compose_sparse_updates, diff_to_update,
                          format_sparse_update, load_sparse_update, parse_sparse_update, revert_sparse_update,
                          save_sparse_update)


def make_store():
    s = NamedParamStore()
    s.add("w", np.linspace(-1, 1, 10), Base)
    s.add("v", np.arange(6.0).reshape(2, 3) / 7, Base)
    return s


def random_update(fp, rng, n=5):
    entries = {}
    for _ in range(n):
        name = rng.choice(["w", "v"])
        idx = int(rng.integers(0, 10 if name == "w" else 6))
        entries[(str(name), idx)] = float(rng.normal())
    return SparseUpdate.from_entries(fp, entries)


def test_compose_example():
    a = SparseUpdate.from_entries("fp", {("w", 3): 0.5})
    b = SparseUpdate.from_entries("fp", {("w", 3): -0.2, ("w", 7): 0.1})
    c = (a + b).entries()
    assert c == {("w", 3): math.fsum([0.5, -0.2]), ("w", 7): 0.1}


def test_inverse_composes_to_empty():
    u = random_update("fp", np.random.default_rng(1))
    assert len(u + (-u)) == 0


@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_composition_is_order_independent(seed, rnd):
    rng = np.random.default_rng(seed)
    ups = [random_update("fp", rng) for _ in range(6)]
    shuffled = list(ups)
    rnd.shuffle(shuffled)
    assert compose_sparse_updates(ups) == compose_sparse_updates(shuffled)


def test_compose_rejects_mixed_bases():
    with pytest.raises(IncompatibleUpdates):
        SparseUpdate.from_entries("a", {("w", 0): 1.0}) + SparseUpdate.from_entries("b", {("w", 0): 1.0})


def test_apply_revert_bitwise():
    s = make_store()
    fp = s.fingerprint()
    u = random_update(fp, np.random.default_rng(2))
    handle = apply_sparse_update(s, u)
    assert s.fingerprint() != fp
    revert_sparse_update(s, handle)
    assert s.fingerprint() == fp
    with pytest.raises(InputError):
        revert_sparse_update(s, handle)


def test_revert_subtracts_after_further_training():
    s = make_store()
    u = SparseUpdate.from_entries(s.fingerprint(), {("w", 0): 0.25})
    handle = apply_sparse_update(s, u)
    s.assign("w", s["w"] + 1.0)
    revert_sparse_update(s, handle)
    assert s["w"][0] == (-1.0 + 0.25 + 1.0) - 0.25
    assert s["w"][1] == np.linspace(-1, 1, 10)[1] + 1.0


def test_stale_base_and_force():
    s = make_store()
    u = SparseUpdate.from_entries("not-this-base", {("w", 0): 1.0})
    with pytest.raises(StaleBaseError):
        apply_sparse_update(s, u)
    apply_sparse_update(s, u, force=True)
    assert s["w"][0] == 0.0


def test_empty_update_is_noop():
    s = make_store()
    fp = s.fingerprint()
    revert_sparse_update(s, apply_sparse_update(s, SparseUpdate(fp)))
    assert s.fingerprint() == fp


def test_ten_composed_equals_sequential():
    s = make_store()
    fp = s.fingerprint()
    rng = np.random.default_rng(3)
    # disjoint coordinates so sequential float addition has a single term per coordinate
    coords = [("w", i) for i in range(10)]
    ups = [SparseUpdate.from_entries(fp, {coords[k]: float(rng.normal())}) for k in range(10)]
    seq = s.copy()
    for u in ups:
        apply_sparse_update(seq, u, force=True)
    apply_sparse_update(s, compose_sparse_updates(ups))
    assert s.fingerprint() == seq.fingerprint()


def test_validation():
    with pytest.raises(InputError):
        SparseUpdate("fp", ("w", "w"), (1, 1), (0.1, 0.2))
    with pytest.raises(InputError):
        SparseUpdate("fp", ("w",), (0,), (0.0,))
    with pytest.raises(InputError):
        SparseUpdate.from_entries("fp", {("w", 0): 1.0, ("w", 1): 1.0}, budget=1)
    s = make_store()
    with pytest.raises(InputError):
        apply_sparse_update(s, SparseUpdate.from_entries(s.fingerprint(), {("w", 99): 1.0}))


def test_diff_to_update():
    s = make_store()
    snap = snapshot_params(s)
    s.assign("v", s["v"] + np.array([[0, 0, 2.0], [0, 0, 0]]))
    u = diff_to_update(s, snap, ["w", "v"])
    assert u.entries() == {("v", 2): pytest.approx(2.0)}
    assert u.base_fingerprint == snap.fingerprint


def test_format_round_trip(tmp_path):
    u = random_update("abc", np.random.default_rng(4), n=8)
    assert parse_sparse_update(format_sparse_update(u)) == u
    save_sparse_update(u, tmp_path / "u.sp")
    assert load_sparse_update(tmp_path / "u.sp") == u
    with pytest.raises(InputError):
        parse_sparse_update("junk\n")
