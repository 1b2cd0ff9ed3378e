"""Small pre-LN transformer encoder with per-language bottleneck adapters.

Parameter census (excluding adapters), with V = vocab_size, d = d_model,
f = d_ffn, P = max_seq_len, n = n_layers::

    embeddings    V*d + P*d
    per layer     4*d                       two layer norms
                  4*(d*d + d)               q, k, v, o projections
                  2*d*f + f + d             feed-forward
    final norm    2*d
    heads         (d+1)*(n_tags + n_classes + V)

Each language's adapter stack adds 2*n*(2*d*b + b + d) parameters
(b = b_dim): one down/up bottleneck after attention and one after the
feed-forward block in every layer.  Adapter up-projections start at zero,
so a freshly inserted stack is an exact identity.
"""

from __future__ import annotations

import enum
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, MissingAdapter
from .params import (ADAPTER, Base, Head, LayerNorm, NamedParamStore, ParamGroup,
                     dump_store, load_store_bytes)

CHECKPOINT_MAGIC = b"CMLCKPT1"
MASK_BIAS = -1e9


class TaskHead(str, enum.Enum):
    TOKEN_TAG = "token_tag"
    SENTENCE_CLASS = "sentence_class"
    MASKED_TOKEN = "masked_token"


@dataclass
class ModelConfig:
    vocab_size: int
    n_tags: int
    n_classes: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    max_seq_len: int = 32
    b_dim: int = 16
    activation: str = "gelu"
    pad_id: int | None = 0

    def validate(self) -> "ModelConfig":
        problems = []
        for key in ("vocab_size", "n_tags", "n_classes", "n_layers", "d_model",
                    "n_heads", "d_ffn", "max_seq_len", "b_dim"):
            if getattr(self, key) < 1:
                problems.append(f"{key} must be >= 1")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            problems.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.b_dim >= self.d_model:
            problems.append(f"b_dim ({self.b_dim}) must be < d_model ({self.d_model})")
        if self.activation != "gelu":
            problems.append(f"unsupported activation {self.activation!r}")
        if self.pad_id is not None and not 0 <= self.pad_id < self.vocab_size:
            problems.append("pad_id outside the vocabulary")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def base_param_count(self) -> int:
        d, f, V, P = self.d_model, self.d_ffn, self.vocab_size, self.max_seq_len
        per_layer = 4 * d + 4 * (d * d + d) + 2 * d * f + f + d
        return V * d + P * d + self.n_layers * per_layer + 2 * d

    def head_param_count(self) -> int:
        return (self.d_model + 1) * (self.n_tags + self.n_classes + self.vocab_size)

    def adapter_param_count(self) -> int:
        d, b = self.d_model, self.b_dim
        return 2 * self.n_layers * (2 * d * b + b + d)


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _uniform(seed: int, name: str, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return _rng(seed, name).uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class AdapterSet:
    """Adapter parameter names per language (values live in the model's store)."""

    stacks: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def languages(self) -> list[str]:
        return sorted(self.stacks)

    def block_count(self) -> int:
        return sum(len(names) // 4 for names in self.stacks.values())

    def fingerprint(self, store: NamedParamStore, language: str) -> str:
        """Content hash of one stack, independent of its language label."""
        prefix = f"adapter.{language}."
        probe = NamedParamStore()
        for name in self.stacks[language]:
            probe.add(name[len(prefix):], store[name], Base)
        return probe.fingerprint()


class Model:
    """Architecture handle around a :class:`NamedParamStore`."""

    def __init__(self, cfg: ModelConfig, store: NamedParamStore, seed: int):
        self.cfg = cfg
        self.store = store
        self.seed = seed

    # -- adapters ------------------------------------------------------------
    @property
    def adapter_languages(self) -> list[str]:
        return sorted({self.store.group(n).language for n in self.store.names(ADAPTER)})

    def adapter_set(self, languages=None) -> AdapterSet:
        languages = self.adapter_languages if languages is None else languages
        return AdapterSet({lang: tuple(self.store.names(ParamGroup.adapter(lang))) for lang in languages})

    def copy(self) -> "Model":
        return Model(self.cfg, self.store.copy(), self.seed)

    # -- forward -------------------------------------------------------------
    def encode(self, batch, active_adapter: str | None = None) -> T.Tensor:
        batch = self._check_batch(batch)
        if active_adapter is not None and active_adapter not in self.adapter_languages:
            raise MissingAdapter(f"no adapter stack for language {active_adapter!r}")
        cfg = self.cfg
        B, L = batch.shape
        d, H = cfg.d_model, cfg.n_heads
        dh = d // H
        leaves: dict[str, T.Tensor] = {}

        def p(name):
            if name not in leaves:
                leaves[name] = self.store.leaf(name)
            return leaves[name]

        def adapter(z, layer, where):
            if active_adapter is None:
                return z
            pre = f"adapter.{active_adapter}.layer{layer}.{where}"
            hidden = T.gelu(T.add(T.matmul(z, p(pre + ".down.w")), p(pre + ".down.b")))
            return T.add(z, T.add(T.matmul(hidden, p(pre + ".up.w")), p(pre + ".up.b")))

        tok = T.embedding(p("embed.token"), batch)
        pos = T.embedding(p("embed.position"), np.arange(L))
        x = T.add(tok, pos)

        bias = None
        if cfg.pad_id is not None:
            pad = batch == cfg.pad_id
            if pad.any():
                bias = T.Tensor(np.where(pad, MASK_BIAS, 0.0)[:, None, None, :])
        scale = T.Tensor(1.0 / np.sqrt(dh))

        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            h = T.layer_norm(x, p(f"{pre}.ln1.gain"), p(f"{pre}.ln1.bias"))

            def heads(proj):
                y = T.add(T.matmul(h, p(f"{pre}.attn.{proj}.w")), p(f"{pre}.attn.{proj}.b"))
                return T.transpose(T.reshape(y, (B, L, H, dh)), (0, 2, 1, 3))

            q, k, v = heads("q"), heads("k"), heads("v")
            scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
            if bias is not None:
                scores = T.add(scores, bias)
            ctx = T.matmul(T.softmax(scores, axis=-1), v)
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
            attn = T.add(T.matmul(ctx, p(f"{pre}.attn.o.w")), p(f"{pre}.attn.o.b"))
            x = T.add(x, adapter(attn, i, "attn"))

            h = T.layer_norm(x, p(f"{pre}.ln2.gain"), p(f"{pre}.ln2.bias"))
            f = T.gelu(T.add(T.matmul(h, p(f"{pre}.ffn.in.w")), p(f"{pre}.ffn.in.b")))
            f = T.add(T.matmul(f, p(f"{pre}.ffn.out.w")), p(f"{pre}.ffn.out.b"))
            x = T.add(x, adapter(f, i, "ffn"))

        return T.layer_norm(x, p("final_ln.gain"), p("final_ln.bias"))

    def forward(self, head: TaskHead, batch, active_adapter: str | None = None) -> T.Tensor:
        """Logits: TOKEN_TAG [B,L,n_tags], SENTENCE_CLASS [B,n_classes], MASKED_TOKEN [B,L,V]."""
        head = TaskHead(head)
        batch = self._check_batch(batch)
        h = self.encode(batch, active_adapter)
        return self.apply_head(head, h, batch)

    def apply_head(self, head: TaskHead, h: T.Tensor, batch: np.ndarray) -> T.Tensor:
        s = self.store
        if head is TaskHead.TOKEN_TAG:
            return T.add(T.matmul(h, s.leaf("head.tag.w")), s.leaf("head.tag.b"))
        if head is TaskHead.MASKED_TOKEN:
            return T.add(T.matmul(h, s.leaf("head.mlm.w")), s.leaf("head.mlm.b"))
        B, L = batch.shape
        if self.cfg.pad_id is not None:
            keep = (batch != self.cfg.pad_id).astype(np.float64)
        else:
            keep = np.ones((B, L))
        weights = T.Tensor((keep / keep.sum(axis=1, keepdims=True))[:, None, :])
        pooled = T.reshape(T.matmul(weights, h), (B, self.cfg.d_model))
        return T.add(T.matmul(pooled, s.leaf("head.cls.w")), s.leaf("head.cls.b"))

    def _check_batch(self, batch) -> np.ndarray:
        batch = np.asarray(batch)
        if batch.ndim != 2:
            raise InputError(f"batch must be [B, L], got shape {batch.shape}")
        if not np.issubdtype(batch.dtype, np.integer):
            raise InputError("token ids must be integers")
        if batch.shape[1] > self.cfg.max_seq_len:
            raise InputError(f"sequence length {batch.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        if batch.size and (batch.min() < 0 or batch.max() >= self.cfg.vocab_size):
            raise InputError("token id outside [0, vocab_size)")
        return batch


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministically initialise every base, layer-norm and head parameter."""
    cfg.validate()
    d, f, V = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    store = NamedParamStore()

    def dense(name, fan_in, fan_out, group):
        store.add(name + ".w", _uniform(seed, name + ".w", (fan_in, fan_out), fan_in), group)
        store.add(name + ".b", np.zeros(fan_out), group)

    def norm(name):
        store.add(name + ".gain", np.ones(d), LayerNorm)
        store.add(name + ".bias", np.zeros(d), LayerNorm)

    store.add("embed.token", _uniform(seed, "embed.token", (V, d), d), Base)
    store.add("embed.position", _uniform(seed, "embed.position", (cfg.max_seq_len, d), d), Base)
    for i in range(cfg.n_layers):
        norm(f"layer{i}.ln1")
        norm(f"layer{i}.ln2")
        for proj in "qkvo":
            dense(f"layer{i}.attn.{proj}", d, d, Base)
        dense(f"layer{i}.ffn.in", d, f, Base)
        dense(f"layer{i}.ffn.out", f, d, Base)
    norm("final_ln")
    dense("head.tag", d, cfg.n_tags, Head)
    dense("head.cls", d, cfg.n_classes, Head)
    dense("head.mlm", d, V, Head)
    return Model(cfg, store, seed)


def insert_adapters(model: Model, languages) -> AdapterSet:
    """Add one zero-output adapter stack per language; base parameters are untouched."""
    languages = list(languages)
    if not languages:
        raise InputError("need at least one language")
    if len(set(languages)) != len(languages):
        raise InputError("duplicate language in adapter insertion")
    existing = set(model.adapter_languages)
    clash = existing.intersection(languages)
    if clash:
        raise InputError(f"adapters already present for {sorted(clash)}")
    cfg = model.cfg
    d, b = cfg.d_model, cfg.b_dim
    for lang in languages:
        group = ParamGroup.adapter(lang)
        for i in range(cfg.n_layers):
            for where in ("attn", "ffn"):
                pre = f"adapter.{lang}.layer{i}.{where}"
                model.store.add(pre + ".down.w", _uniform(model.seed, pre + ".down.w", (d, b), d), group)
                model.store.add(pre + ".down.b", np.zeros(b), group)
                model.store.add(pre + ".up.w", np.zeros((b, d)), group)
                model.store.add(pre + ".up.b", np.zeros(d), group)
    return model.adapter_set(languages)


def clone_adapters(model: Model, source: str, languages, drop_source: bool = False) -> AdapterSet:
    """Deep-copy the ``source`` stack once per language."""
    languages = list(languages)
    if len(set(languages)) != len(languages):
        raise InputError("duplicate language in adapter cloning")
    if source not in model.adapter_languages:
        raise MissingAdapter(f"no adapter stack for language {source!r}")
    clash = (set(model.adapter_languages) - {source}).intersection(languages)
    if clash:
        raise InputError(f"adapters already present for {sorted(clash)}")
    src_prefix = f"adapter.{source}."
    src_names = model.store.names(ParamGroup.adapter(source))
    values = {n: model.store[n] for n in src_names}
    if drop_source or source in languages:
        for n in src_names:
            model.store.remove(n)
    for lang in languages:
        group = ParamGroup.adapter(lang)
        for n in src_names:
            model.store.add(f"adapter.{lang}." + n[len(src_prefix):], values[n], group)
    return model.adapter_set(languages)


def remove_adapters(model: Model, language: str) -> None:
    for n in model.store.names(ParamGroup.adapter(language)):
        model.store.remove(n)


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, then the store format
# ---------------------------------------------------------------------------

def dump_checkpoint(model: Model, store: NamedParamStore | None = None) -> bytes:
    header = json.dumps({"config": asdict(model.cfg), "seed": model.seed}, sort_keys=True).encode()
    body = dump_store(model.store if store is None else store)
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + body


def load_checkpoint_bytes(data: bytes) -> Model:
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise InputError("not a model checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", data[off:off + 4])
    header = json.loads(data[off + 4:off + 4 + n])
    store = load_store_bytes(data[off + 4 + n:])
    return Model(ModelConfig(**header["config"]), store, header["seed"])


def save_checkpoint(model: Model, path) -> None:
    from .artifacts import atomic_write_bytes

    atomic_write_bytes(Path(path), dump_checkpoint(model))


def load_checkpoint(path) -> Model:
    return load_checkpoint_bytes(Path(path).read_bytes())


def save_adapter(model: Model, language: str, path) -> None:
    """Write one language's adapter stack as a standalone checkpoint."""
    from .artifacts import atomic_write_bytes

    names = model.store.names(ParamGroup.adapter(language))
    if not names:
        raise MissingAdapter(f"no adapter stack for language {language!r}")
    sub = NamedParamStore()
    for n in names:
        sub.add(n, model.store[n], model.store.group(n))
    atomic_write_bytes(Path(path), dump_checkpoint(model, sub))


def load_adapter(model: Model, path, replace: bool = False) -> str:
    """Insert the adapter stack stored at ``path``; returns its language."""
    sub = load_checkpoint(path).store
    langs = {sub.group(n).language for n in sub.names()}
    if len(langs) != 1 or sub.names(ADAPTER) != sub.names():
        raise InputError("adapter file must hold exactly one adapter stack")
    (lang,) = langs
    if lang in model.adapter_languages:
        if not replace:
            raise InputError(f"adapters already present for {lang!r}")
        remove_adapters(model, lang)
    for n, arr, group in sub.items():
        model.store.add(n, arr, group)
    return lang
