import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cmlab import tensor as T
from cmlab.errors import IncompatibleSnapshot, InputError
from cmlab.params import (ADAPTER, BASE, Base, Head, LayerNorm, NamedParamStore, ParamGroup, dump_store,
                          finite_difference_check, group_matcher, load_store, load_store_bytes, param_delta,
                          restore_params, save_store, snapshot_params)


def make_store():
    s = NamedParamStore()
    s.add("w", np.arange(6.0).reshape(2, 3), Base)
    s.add("ln.gain", np.ones(3), LayerNorm)
    s.add("head.b", np.zeros(2), Head)
    s.add("adapter.en.x", np.full(4, 0.5), ParamGroup.adapter("en"))
    return s


def test_arrays_are_read_only():
    s = make_store()
    with pytest.raises(ValueError):
        s["w"][0, 0] = 1.0


def test_add_copies_input():
    a = np.zeros(3)
    s = NamedParamStore()
    s.add("a", a, Base)
    a[0] = 5.0
    assert s["a"][0] == 0.0


def test_version_bumps_on_every_mutation():
    s = make_store()
    v = s.version
    s.assign("w", np.zeros((2, 3)))
    s.remove("head.b")
    assert s.version == v + 2


def test_duplicate_and_shape_errors():
    s = make_store()
    with pytest.raises(InputError):
        s.add("w", np.zeros(1), Base)
    with pytest.raises(InputError):
        s.assign("w", np.zeros(3))


def test_group_selection():
    s = make_store()
    assert s.names(BASE) == ["w"]
    assert s.names(ParamGroup.adapter("en")) == ["adapter.en.x"]
    assert s.names([ADAPTER, "head"]) == ["adapter.en.x", "head.b"]
    assert s.size() == 6 + 3 + 2 + 4
    assert group_matcher(lambda g: g.kind == "layernorm")(LayerNorm)


def test_group_tags_round_trip():
    for g in (Base, Head, LayerNorm, ParamGroup.adapter("th")):
        assert ParamGroup.from_tag(g.tag) == g


def test_fingerprint_tracks_values_and_groups():
    a, b = make_store(), make_store()
    assert a.fingerprint() == b.fingerprint()
    b.assign("w", b["w"] + 1e-300)
    assert a.fingerprint() != b.fingerprint()
    assert a.fingerprint(BASE) != b.fingerprint(BASE)
    assert a.fingerprint(LayerNorm) == b.fingerprint(LayerNorm)


def test_copy_is_independent():
    a = make_store()
    b = a.copy()
    b.assign("w", np.zeros((2, 3)))
    assert a["w"][1, 2] == 5.0


def test_snapshot_restore_bitwise():
    s = make_store()
    snap = snapshot_params(s)
    s.assign("w", s["w"] * 3)
    s.remove("head.b")
    s.add("extra", np.ones(2), Base)
    restore_params(s, snap)
    assert s.fingerprint() == snap.fingerprint
    assert s.names() == sorted(snap.arrays)


def test_restore_distinguishes_signed_zero():
    s = NamedParamStore()
    s.add("z", np.array([0.0]), Base)
    snap = snapshot_params(s)
    s.assign("z", np.array([-0.0]))
    restore_params(s, snap)
    assert not np.signbit(s["z"][0])


def test_param_delta_and_mismatch():
    s = make_store()
    snap = snapshot_params(s)
    s.assign("w", s["w"] + 2)
    d = param_delta(s, snap, BASE)
    np.testing.assert_array_equal(d["w"], np.full((2, 3), 2.0))
    s.add("new", np.zeros(1), Base)
    with pytest.raises(IncompatibleSnapshot):
        param_delta(s, snap, BASE)


def test_serialization_round_trip(tmp_path):
    s = make_store()
    path = tmp_path / "p.bin"
    save_store(s, path)
    back = load_store(path)
    assert back.fingerprint() == s.fingerprint()
    assert [back.group(n) for n in back.names()] == [s.group(n) for n in s.names()]


def test_serialization_rejects_bad_magic():
    with pytest.raises(InputError):
        load_store_bytes(b"NOTMAGIC" + b"\0" * 8)


@given(st.dictionaries(st.text("abcxyz.", min_size=1, max_size=6),
                       hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=4),
                                  elements=st.floats(allow_nan=False, allow_infinity=False)),
                       max_size=4))
def test_serialization_round_trip_property(arrays):
    s = NamedParamStore()
    for name, arr in arrays.items():
        s.add(name, arr, Base)
    back = load_store_bytes(dump_store(s))
    assert back.names() == s.names()
    for name in s.names():
        assert back[name].tobytes() == s[name].tobytes()
        assert back[name].shape == s[name].shape


def test_finite_difference_check_on_quadratic():
    s = NamedParamStore()
    s.add("x", np.array([1.0, -2.0, 0.5]), Base)

    def loss(store):
        x = store.leaf("x")
        return T.sum(T.mul(T.mul(x, x), x))

    results = finite_difference_check(s, loss, [("x", 0), ("x", 1), ("x", 2)])
    assert max(r.rel_err for r in results) < 1e-8
    np.testing.assert_allclose([r.analytic for r in results], 3 * s["x"] ** 2)
