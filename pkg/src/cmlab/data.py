"""Seeded synthetic multilingual benchmark.

Every language realises the same concept-level task.  A sentence is a
sequence of concept ids; each concept belongs to a class (``id % n_classes``).
Tags come from a concept-level rule, then the language applies its word
order transform (tags travel with their tokens) and maps every concept to
its surface token.

Token layout: ``0`` pad, ``1`` mask, then a block of surface tokens shared
by all languages, then one private block per language.
"""

from __future__ import annotations

import hashlib
import io
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, EndOfEpoch, InputError
from .uriel import DistanceMatrix, SyntacticVector, distance_matrix

PAD_ID = 0
MASK_ID = 1
N_SPECIAL = 2
TOKEN_TAG = "token_tag"
SENTENCE_CLASS = "sentence_class"

# designated syntactic bits driving word order, composed in this order
ORDER_BITS = {"reverse": 0, "swap": 1, "rotate": 2}
SKEWED_RATIOS = (1.0, 0.75, 0.5, 0.25)


def _rng(seed: int, *keys) -> np.random.Generator:
    salt = [zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng([seed, *salt])


# ---------------------------------------------------------------------------
# word order
# ---------------------------------------------------------------------------

def order_permutation(length: int, transforms: Sequence[str]) -> np.ndarray:
    """Index array ``perm`` such that ``surface = concept_seq[perm]``."""
    perm = np.arange(length)
    for t in transforms:
        if t == "reverse":
            perm = perm[::-1]
        elif t == "swap":
            idx = np.arange(length)
            pairs = idx[: length - length % 2].reshape(-1, 2)[:, ::-1].ravel()
            idx[: len(pairs)] = pairs
            perm = perm[idx]
        elif t == "rotate":
            perm = np.roll(perm, 1)
        else:
            raise InputError(f"unknown word order transform {t!r}")
    return perm


@dataclass(frozen=True)
class LanguageProfile:
    language: str
    family: str
    vector: np.ndarray
    surface_ids: np.ndarray  # concept id -> surface token id
    resource_count: int

    @property
    def word_order(self) -> tuple[str, ...]:
        return tuple(t for t, bit in ORDER_BITS.items() if self.vector[bit] > 0.5)

    def syntactic_vector(self) -> SyntacticVector:
        return SyntacticVector(self.language, self.vector)

    def realise(self, concepts: np.ndarray, labels: np.ndarray | None = None):
        perm = order_permutation(len(concepts), self.word_order)
        tokens = self.surface_ids[np.asarray(concepts)[perm]]
        if labels is None:
            return tokens
        return tokens, np.asarray(labels)[perm]

    def unrealise(self, tokens: np.ndarray) -> np.ndarray:
        """Concept sequence (in concept order) behind a surface sequence."""
        inverse = {int(t): c for c, t in enumerate(self.surface_ids)}
        concepts_surface_order = np.array([inverse[int(t)] for t in tokens])
        perm = order_permutation(len(tokens), self.word_order)
        out = np.empty_like(concepts_surface_order)
        out[perm] = concepts_surface_order
        return out


def generate_language_set(n_families: int = 2, langs_per_family: int = 3, p_in: float = 0.05,
                          p_out: float = 0.35, seed: int = 0, n_features: int = 16,
                          n_concepts: int = 24, shared_fraction: float = 0.2, base_resource: int = 400,
                          resource_ratios: Sequence[float] = SKEWED_RATIOS,
                          identity_surface: bool = False) -> tuple[list[LanguageProfile], DistanceMatrix]:
    """Families of languages with controlled syntactic similarity.

    A root vector is drawn; each family prototype flips root bits with
    probability ``p_out`` (redrawn until every family has its own word
    order, when there are few enough families for that); each member flips
    prototype bits with probability ``p_in``.
    """
    problems = []
    if n_features < len(ORDER_BITS):
        problems.append(f"need at least {len(ORDER_BITS)} syntactic features")
    if not (0 <= p_in <= 0.5 and 0 <= p_out <= 0.5):
        problems.append("flip probabilities must lie in [0, 0.5]")
    if n_families < 1 or langs_per_family < 1:
        problems.append("need at least one family and one language per family")
    if not 0 <= shared_fraction < 1:
        problems.append("shared_fraction must lie in [0, 1)")
    if problems:
        raise ConfigError("; ".join(problems))

    rng = _rng(seed, "languages")
    root = rng.random(n_features) < 0.5
    order_idx = list(ORDER_BITS.values())
    distinct = n_families <= 2 ** len(order_idx) and p_out > 0
    protos: list[np.ndarray] = []
    while len(protos) < n_families:
        cand = root ^ (rng.random(n_features) < p_out)
        if distinct and any(np.array_equal(cand[order_idx], p[order_idx]) for p in protos):
            continue
        protos.append(cand)

    n_shared = int(round(shared_fraction * n_concepts))
    n_private = n_concepts - n_shared
    shared_concepts = np.sort(_rng(seed, "shared").permutation(n_concepts)[:n_shared])
    private_concepts = np.setdiff1d(np.arange(n_concepts), shared_concepts)
    n_langs = n_families * langs_per_family

    profiles = []
    for f in range(n_families):
        family = chr(ord("A") + f)
        for m in range(langs_per_family):
            k = f * langs_per_family + m
            vec = protos[f] ^ (rng.random(n_features) < p_in)
            while not vec.any():
                vec = protos[f] ^ (rng.random(n_features) < p_in)
            surface = np.empty(n_concepts, dtype=np.int64)
            surface[shared_concepts] = N_SPECIAL + np.arange(n_shared)
            offset = N_SPECIAL + n_shared + k * n_private
            slots = np.arange(n_private) if identity_surface else _rng(seed, "surface", k).permutation(n_private)
            surface[private_concepts] = offset + slots
            count = int(round(base_resource * resource_ratios[k % len(resource_ratios)]))
            profiles.append(LanguageProfile(f"{family}{m + 1}", family, vec.astype(np.float64),
                                            surface, count))
    assert len(profiles) == n_langs
    return profiles, distance_matrix([p.syntactic_vector() for p in profiles])


def vocab_size_for(profiles: Sequence[LanguageProfile]) -> int:
    return int(max(p.surface_ids.max() for p in profiles)) + 1


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------

def concept_tags(concepts: np.ndarray, n_classes: int) -> np.ndarray:
    """Tag rule on concept order.

    Class-0 concepts are tagged by position parity (tags 0/1); any other
    class c gets ``2c`` when it opens a run and ``2c + 1`` when its left
    neighbour has the same class.
    """
    cls = np.asarray(concepts) % n_classes
    tags = np.empty(len(cls), dtype=np.int64)
    for p, c in enumerate(cls):
        if c == 0:
            tags[p] = p % 2
        else:
            tags[p] = 2 * c + int(p > 0 and cls[p - 1] == c)
    return tags


def sentence_class(concepts: np.ndarray, n_classes: int) -> int:
    """Majority concept class, ties to the smallest class."""
    counts = np.bincount(np.asarray(concepts) % n_classes, minlength=n_classes)
    return int(np.argmax(counts))


@dataclass(frozen=True)
class Example:
    tokens: np.ndarray
    labels: np.ndarray | int
    language: str


@dataclass
class Corpus:
    language: str
    task: str
    tokens: list[np.ndarray] = field(default_factory=list)
    labels: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, i: int) -> Example:
        return Example(self.tokens[i], self.labels[i], self.language)

    def __iter__(self) -> Iterator[Example]:
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> "Corpus":
        return Corpus(self.language, self.task, [self.tokens[i] for i in indices],
                      [self.labels[i] for i in indices])

    def digest(self) -> str:
        h = hashlib.sha256(self.language.encode())
        for t, y in zip(self.tokens, self.labels):
            h.update(np.asarray(t, dtype="<i8").tobytes())
            h.update(b"|" + np.asarray(y, dtype="<i8").tobytes() + b";")
        return h.hexdigest()


def generate_concepts(n_examples: int, seq_len: tuple[int, int], n_concepts: int, n_classes: int,
                      rng: np.random.Generator, p_same_class: float = 0.4) -> list[np.ndarray]:
    lo, hi = seq_len
    out = []
    for _ in range(n_examples):
        length = int(rng.integers(lo, hi + 1))
        cls = np.empty(length, dtype=np.int64)
        cls[0] = rng.integers(n_classes)
        for p in range(1, length):
            cls[p] = cls[p - 1] if rng.random() < p_same_class else rng.integers(n_classes)
        # concept ids with class c are c, c + n_classes, c + 2 n_classes, ...
        per_class = [np.arange(c, n_concepts, n_classes) for c in range(n_classes)]
        out.append(np.array([rng.choice(per_class[c]) for c in cls], dtype=np.int64))
    return out


def generate_corpus(profile: LanguageProfile, task: str, n_examples: int, seq_len: tuple[int, int],
                    seed: int, n_classes: int = 4, p_same_class: float = 0.4,
                    concepts: list[np.ndarray] | None = None) -> Corpus:
    """Surface corpus for one language.

    Concept sequences depend only on ``(seed, task)``, so equal seeds give
    parallel corpora across languages.  Pass ``concepts`` to realise a
    fixed list instead.
    """
    if n_examples < 1:
        raise InputError("n_examples must be >= 1")
    if seq_len[0] < 1 or seq_len[1] < seq_len[0]:
        raise InputError("invalid sequence length range")
    n_concepts = len(profile.surface_ids)
    if concepts is None:
        concepts = generate_concepts(n_examples, seq_len, n_concepts, n_classes,
                                     _rng(seed, "corpus", task), p_same_class)
    corpus = Corpus(profile.language, task)
    for seq in concepts:
        if task == TOKEN_TAG:
            tokens, tags = profile.realise(seq, concept_tags(seq, n_classes))
            corpus.tokens.append(tokens)
            corpus.labels.append(tags)
        elif task == SENTENCE_CLASS:
            corpus.tokens.append(profile.realise(seq))
            corpus.labels.append(sentence_class(seq, n_classes))
        else:
            raise InputError(f"unknown task kind {task!r}")
    return corpus


# ---------------------------------------------------------------------------
# stage partitions and batching
# ---------------------------------------------------------------------------

@dataclass
class StagePartition:
    """Per language: S disjoint shards (shard 0 is the inception shard)."""

    shards: dict[str, list[Corpus]]
    indices: dict[str, list[list[int]]]

    def shard(self, language: str, stage: int) -> Corpus:
        return self.shards[language][stage]


def partition_indices(n: int, n_stages: int, seed: int, key: str = "") -> list[list[int]]:
    if n_stages < 1:
        raise InputError("need at least one stage")
    if n_stages > n:
        raise InputError(f"cannot split {n} examples into {n_stages} shards")
    order = _rng(seed, "partition", key).permutation(n)
    return [sorted(int(i) for i in part) for part in np.array_split(order, n_stages)]


def partition_stages(corpus: Corpus, n_stages: int, seed: int) -> list[Corpus]:
    """Seeded shuffle then split into ``n_stages`` near-equal disjoint shards."""
    return [corpus.subset(idx) for idx in partition_indices(len(corpus), n_stages, seed, corpus.language)]


def partition_all(corpora: Mapping[str, Corpus], n_stages: int, seed: int) -> StagePartition:
    indices = {lang: partition_indices(len(c), n_stages, seed, lang) for lang, c in corpora.items()}
    shards = {lang: [corpora[lang].subset(ix) for ix in indices[lang]] for lang in corpora}
    return StagePartition(shards, indices)


@dataclass
class Batch:
    language: str
    tokens: np.ndarray   # [B, L] padded with PAD_ID
    labels: np.ndarray   # [B, L] tags (pads hold 0) or [B] classes
    weights: np.ndarray  # [B, L] 1 on real tokens


def collate(examples: Sequence[Example] | Corpus, indices=None) -> Batch:
    if isinstance(examples, Corpus):
        corpus = examples
        idx = range(len(corpus)) if indices is None else indices
        toks = [corpus.tokens[i] for i in idx]
        labs = [corpus.labels[i] for i in idx]
        lang, task = corpus.language, corpus.task
    else:
        toks = [e.tokens for e in examples]
        labs = [e.labels for e in examples]
        lang = examples[0].language
        task = SENTENCE_CLASS if np.ndim(labs[0]) == 0 else TOKEN_TAG
    L = max(len(t) for t in toks)
    B = len(toks)
    tokens = np.full((B, L), PAD_ID, dtype=np.int64)
    weights = np.zeros((B, L))
    for i, t in enumerate(toks):
        tokens[i, :len(t)] = t
        weights[i, :len(t)] = 1.0
    if task == TOKEN_TAG:
        labels = np.zeros((B, L), dtype=np.int64)
        for i, y in enumerate(labs):
            labels[i, :len(y)] = y
    else:
        labels = np.asarray(labs, dtype=np.int64)
    return Batch(lang, tokens, labels, weights)


def iterate_batches(corpus: Corpus, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
    order = np.arange(len(corpus)) if rng is None else rng.permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        yield collate(corpus, order[start:start + batch_size])


class ShardIterator:
    """Single-consumer batch iterator that knows whether it is exhausted."""

    def __init__(self, corpus: Corpus, batch_size: int, rng: np.random.Generator | None = None):
        self._it = iterate_batches(corpus, batch_size, rng)
        self._next = next(self._it, None)

    @property
    def exhausted(self) -> bool:
        return self._next is None

    def pop(self) -> Batch:
        if self._next is None:
            raise EndOfEpoch("shard exhausted")
        out, self._next = self._next, next(self._it, None)
        return out


def sample_multisource_batch(iterators: Mapping[str, ShardIterator], rng: np.random.Generator) -> Batch:
    """Monolingual batch from a language drawn uniformly among non-exhausted ones."""
    live = [lang for lang in sorted(iterators) if not iterators[lang].exhausted]
    if not live:
        raise EndOfEpoch("all languages exhausted")
    return iterators[live[int(rng.integers(len(live)))]].pop()


def multisource_epoch(corpora: Mapping[str, Corpus], batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    iterators = {lang: ShardIterator(c, batch_size, rng) for lang, c in sorted(corpora.items())}
    while True:
        try:
            yield sample_multisource_batch(iterators, rng)
        except EndOfEpoch:
            return


def mixed_epoch(corpora: Mapping[str, Corpus], batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """Shuffled batches drawing examples from all languages together."""
    pool = [(lang, i) for lang in sorted(corpora) for i in range(len(corpora[lang]))]
    order = rng.permutation(len(pool))
    for start in range(0, len(order), batch_size):
        examples = [corpora[pool[k][0]][pool[k][1]] for k in order[start:start + batch_size]]
        yield collate(examples)


# ---------------------------------------------------------------------------
# whole benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkSpec:
    n_families: int = 2
    langs_per_family: int = 3
    p_in: float = 0.05
    p_out: float = 0.35
    n_features: int = 16
    n_concepts: int = 24
    n_classes: int = 4
    shared_fraction: float = 0.2
    task: str = TOKEN_TAG
    base_resource: int = 400
    resource_ratios: tuple[float, ...] = SKEWED_RATIOS
    dev_size: int = 100
    test_size: int = 200
    seq_len: tuple[int, int] = (8, 12)
    p_same_class: float = 0.4
    n_stages: int = 2
    data_seed: int = 0


@dataclass
class Benchmark:
    spec: BenchmarkSpec
    profiles: list[LanguageProfile]
    distances: DistanceMatrix
    train: dict[str, Corpus]
    dev: dict[str, Corpus]
    test: dict[str, Corpus]

    @property
    def languages(self) -> list[str]:
        return [p.language for p in self.profiles]

    @property
    def vocab_size(self) -> int:
        return vocab_size_for(self.profiles)

    @property
    def n_tags(self) -> int:
        return 2 * self.spec.n_classes

    def profile(self, language: str) -> LanguageProfile:
        return next(p for p in self.profiles if p.language == language)

    def resource_counts(self) -> dict[str, int]:
        return {p.language: p.resource_count for p in self.profiles}

    def partition(self, seed: int) -> StagePartition:
        return partition_all(self.train, self.spec.n_stages, seed)


def build_benchmark(spec: BenchmarkSpec) -> Benchmark:
    """Profiles plus train/dev/test corpora; dev and test are fixed for every stage and seed."""
    s = spec
    profiles, D = generate_language_set(s.n_families, s.langs_per_family, s.p_in, s.p_out, s.data_seed,
                                        s.n_features, s.n_concepts, base_resource=s.base_resource,
                                        shared_fraction=s.shared_fraction, resource_ratios=s.resource_ratios)
    splits = {}
    for split, size_of in (("train", lambda p: p.resource_count), ("dev", lambda p: s.dev_size),
                           ("test", lambda p: s.test_size)):
        splits[split] = {
            p.language: generate_corpus(p, s.task, size_of(p), tuple(s.seq_len), s.data_seed + _split_salt(split),
                                        s.n_classes, s.p_same_class)
            for p in profiles
        }
    return Benchmark(spec, profiles, D, splits["train"], splits["dev"], splits["test"])


def _split_salt(split: str) -> int:
    return {"train": 0, "dev": 1_000_003, "test": 2_000_003}[split]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def format_corpus(corpus: Corpus) -> str:
    """One ``lang<TAB>tokens<TAB>labels`` record per line."""
    buf = io.StringIO()
    for t, y in zip(corpus.tokens, corpus.labels):
        labels = " ".join(str(int(v)) for v in np.atleast_1d(y))
        buf.write(f"{corpus.language}\t{' '.join(str(int(v)) for v in t)}\t{labels}\n")
    return buf.getvalue()


def parse_corpus(text: str, task: str) -> Corpus:
    corpus = None
    for line in text.splitlines():
        if not line:
            continue
        lang, toks, labs = line.split("\t")
        if corpus is None:
            corpus = Corpus(lang, task)
        elif lang != corpus.language:
            raise InputError("corpus file mixes languages")
        corpus.tokens.append(np.array([int(v) for v in toks.split()], dtype=np.int64))
        labels = np.array([int(v) for v in labs.split()], dtype=np.int64)
        corpus.labels.append(labels if task == TOKEN_TAG else int(labels[0]))
    if corpus is None:
        raise InputError("empty corpus file")
    return corpus


def benchmark_manifest(bench: Benchmark, partition: StagePartition | None = None) -> dict:
    out = {
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(bench.spec).items()},
        "vocab_size": bench.vocab_size,
        "languages": [
            {"lang": p.language, "family": p.family, "vector": [int(v) for v in p.vector],
             "word_order": list(p.word_order), "resource_count": p.resource_count,
             "surface_ids": [int(v) for v in p.surface_ids]}
            for p in bench.profiles
        ],
        "corpora": {split: {lang: c.digest() for lang, c in getattr(bench, split).items()}
                    for split in ("train", "dev", "test")},
    }
    if partition is not None:
        out["shards"] = partition.indices
    return out


def write_benchmark(bench: Benchmark, out_dir, seed: int | None = None) -> list[Path]:
    """Corpus files, syntactic vectors, distances and a JSON manifest."""
    from .artifacts import atomic_write_text, dumps_report
    from .uriel import format_distance_csv, format_vectors_csv

    out_dir = Path(out_dir)
    written = []
    for split in ("train", "dev", "test"):
        for lang, corpus in getattr(bench, split).items():
            path = out_dir / "corpora" / f"{split}.{lang}.tsv"
            atomic_write_text(path, format_corpus(corpus))
            written.append(path)
    vec = out_dir / "vectors.csv"
    atomic_write_text(vec, format_vectors_csv([p.syntactic_vector() for p in bench.profiles]))
    dist = out_dir / "distances.csv"
    atomic_write_text(dist, format_distance_csv(bench.distances))
    partition = bench.partition(seed) if seed is not None else None
    man = out_dir / "benchmark.json"
    atomic_write_text(man, dumps_report(benchmark_manifest(bench, partition)))
    return written + [vec, dist, man]
