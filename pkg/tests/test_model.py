import numpy as np
import pytest

from cmlab import tensor as T
from cmlab.errors import ConfigError, InputError, MissingAdapter
from cmlab.model import (ModelConfig, TaskHead, build_model, clone_adapters, insert_adapters, load_adapter,
                         load_checkpoint, remove_adapters, save_adapter, save_checkpoint)
from cmlab.params import ADAPTER, BASE, HEAD, LAYERNORM, ParamGroup


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(vocab_size=10, n_tags=3, n_classes=2, d_model=64, n_heads=5).validate()


def test_config_lists_every_problem():
    with pytest.raises(ConfigError) as err:
        ModelConfig(vocab_size=10, n_tags=3, n_classes=2, d_model=64, n_heads=5, b_dim=64).validate()
    assert "divisible" in str(err.value) and "b_dim" in str(err.value)


def test_default_census_matches_closed_form():
    cfg = ModelConfig(vocab_size=100, n_tags=8, n_classes=4)
    m = build_model(cfg, 0)
    d, f, V, P, n = 64, 128, 100, 32, 2
    base = V * d + P * d + n * (4 * d + 4 * (d * d + d) + 2 * d * f + f + d) + 2 * d
    assert m.store.size([BASE, LAYERNORM]) == base == cfg.base_param_count()
    assert m.store.size(HEAD) == (d + 1) * (8 + 4 + V) == cfg.head_param_count()
    insert_adapters(m, ["en"])
    assert m.store.size(ADAPTER) == 2 * n * (2 * d * 16 + 16 + d) == cfg.adapter_param_count()


def test_adapter_share_of_base_is_about_three_percent():
    # realistic vocabulary for the reference benchmark
    cfg = ModelConfig(vocab_size=2 + 5 + 6 * 19, n_tags=8, n_classes=4)
    share = cfg.adapter_param_count() / cfg.base_param_count()
    assert 0.03 < share < 0.15


def test_build_is_deterministic(small_cfg):
    a, b = build_model(small_cfg, 3), build_model(small_cfg, 3)
    assert a.store.fingerprint() == b.store.fingerprint()
    assert build_model(small_cfg, 4).store.fingerprint() != a.store.fingerprint()


def test_init_conventions(small_model):
    s = small_model.store
    np.testing.assert_array_equal(s["layer0.ln1.gain"], 1.0)
    np.testing.assert_array_equal(s["layer0.ln1.bias"], 0.0)
    np.testing.assert_array_equal(s["layer0.attn.q.b"], 0.0)
    assert np.abs(s["layer0.attn.q.w"]).max() <= np.sqrt(3 / 8)


def test_head_shapes(small_model, token_batch):
    assert small_model.forward(TaskHead.TOKEN_TAG, token_batch).shape == (3, 6, 5)
    assert small_model.forward(TaskHead.SENTENCE_CLASS, token_batch).shape == (3, 3)
    assert small_model.forward(TaskHead.MASKED_TOKEN, token_batch).shape == (3, 6, 20)


def test_forward_is_pure_and_deterministic(small_model, token_batch):
    v = small_model.store.version
    a = small_model.forward(TaskHead.TOKEN_TAG, token_batch).data
    b = small_model.forward(TaskHead.TOKEN_TAG, token_batch).data
    assert small_model.store.version == v
    assert a.tobytes() == b.tobytes()


def test_fresh_adapters_are_identity(small_model, token_batch):
    before = small_model.forward(TaskHead.TOKEN_TAG, token_batch).data
    insert_adapters(small_model, ["en", "hi"])
    after = small_model.forward(TaskHead.TOKEN_TAG, token_batch, "hi").data
    assert np.max(np.abs(after - before)) <= 1e-12


def test_adapter_isolation_zero_gradient(small_model, token_batch):
    insert_adapters(small_model, ["en", "hi"])
    # make the en stack non-trivial so gradients can flow through it
    for n in small_model.store.names(ParamGroup.adapter("en")):
        small_model.store.assign(n, small_model.store[n] + 0.1)
    logits = small_model.forward(TaskHead.TOKEN_TAG, token_batch, "en")
    grads = T.backward_pass(T.cross_entropy(logits, np.zeros((3, 6), dtype=int)))
    assert all(not n.startswith("adapter.hi.") for n in grads)
    assert any(n.startswith("adapter.en.") for n in grads)


def test_head_swap_does_not_change_encoder(small_model, token_batch):
    h1 = small_model.encode(token_batch).data
    small_model.forward(TaskHead.SENTENCE_CLASS, token_batch)
    h2 = small_model.encode(token_batch).data
    assert h1.tobytes() == h2.tobytes()


def test_padding_does_not_leak(small_model):
    a = np.array([[5, 6, 7, 0, 0]])
    b = np.array([[5, 6, 7, 0, 0, 0, 0]])
    la = small_model.forward(TaskHead.SENTENCE_CLASS, a).data
    lb = small_model.forward(TaskHead.SENTENCE_CLASS, b).data
    np.testing.assert_allclose(la, lb, atol=1e-12)


def test_input_errors(small_model):
    with pytest.raises(InputError):
        small_model.forward(TaskHead.TOKEN_TAG, np.array([[1, 99]]))
    with pytest.raises(InputError):
        small_model.forward(TaskHead.TOKEN_TAG, np.ones((1, 11), dtype=int))
    with pytest.raises(MissingAdapter):
        small_model.forward(TaskHead.TOKEN_TAG, np.array([[1, 2]]), "xx")


def test_insert_counts_and_duplicates(small_model):
    aset = insert_adapters(small_model, [f"l{i}" for i in range(6)])
    assert aset.block_count() == 6 * 1 * 2
    with pytest.raises(InputError):
        insert_adapters(small_model, ["a", "a"])
    with pytest.raises(InputError):
        insert_adapters(small_model, ["l0"])


def test_clone_isolation_and_fingerprints(small_model):
    insert_adapters(small_model, ["src"])
    name = "adapter.src.layer0.attn.up.w"
    small_model.store.assign(name, small_model.store[name] + 1.0)
    aset = clone_adapters(small_model, "src", ["en", "hi"], drop_source=True)
    assert "src" not in small_model.adapter_languages
    assert aset.fingerprint(small_model.store, "en") == aset.fingerprint(small_model.store, "hi")
    hi = "adapter.hi.layer0.attn.up.w"
    small_model.store.assign(hi, small_model.store[hi] * 2)
    np.testing.assert_array_equal(small_model.store["adapter.en.layer0.attn.up.w"], 1.0)


def test_clone_of_fresh_adapters_is_identity(small_model, token_batch):
    base = small_model.forward(TaskHead.TOKEN_TAG, token_batch).data
    insert_adapters(small_model, ["src"])
    clone_adapters(small_model, "src", ["en", "hi"])
    for lang in ("en", "hi"):
        out = small_model.forward(TaskHead.TOKEN_TAG, token_batch, lang).data
        assert np.max(np.abs(out - base)) <= 1e-12


def test_remove_adapters(small_model):
    insert_adapters(small_model, ["en"])
    remove_adapters(small_model, "en")
    assert small_model.adapter_languages == []


def test_checkpoint_round_trip(small_model, token_batch, tmp_path):
    insert_adapters(small_model, ["en"])
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    back = load_checkpoint(path)
    assert back.store.fingerprint() == small_model.store.fingerprint()
    assert back.cfg == small_model.cfg
    a = back.forward(TaskHead.TOKEN_TAG, token_batch, "en").data
    assert a.tobytes() == small_model.forward(TaskHead.TOKEN_TAG, token_batch, "en").data.tobytes()


def test_adapter_save_and_swap(small_model, tmp_path):
    insert_adapters(small_model, ["en"])
    n = "adapter.en.layer0.ffn.up.b"
    small_model.store.assign(n, small_model.store[n] + 3)
    save_adapter(small_model, "en", tmp_path / "en.ad")
    other = build_model(small_model.cfg, 0)
    assert load_adapter(other, tmp_path / "en.ad") == "en"
    np.testing.assert_array_equal(other.store[n], 3.0)
    with pytest.raises(InputError):
        load_adapter(other, tmp_path / "en.ad")
    load_adapter(other, tmp_path / "en.ad", replace=True)
    with pytest.raises(MissingAdapter):
        save_adapter(small_model, "xx", tmp_path / "xx.ad")
