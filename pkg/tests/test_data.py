import itertools
from collections import Counter

import numpy as np
import pytest

from cmlab.data import (TOKEN_TAG, SENTENCE_CLASS, BenchmarkSpec, Corpus, build_benchmark, collate,
                        concept_tags, format_corpus, generate_concepts, generate_corpus, generate_language_set,
                        multisource_epoch, order_permutation, parse_corpus, partition_stages,
                        sample_multisource_batch, sentence_class, ShardIterator)
from cmlab.errors import ConfigError, EndOfEpoch, InputError


def family_pairs(profiles):
    intra, inter = [], []
    for a, b in itertools.combinations(profiles, 2):
        (intra if a.family == b.family else inter).append((a, b))
    return intra, inter


def test_zero_in_family_flip_gives_identical_members():
    profiles, D = generate_language_set(p_in=0.0, seed=3)
    intra, _ = family_pairs(profiles)
    assert all(D[a.language, b.language] == 0.0 for a, b in intra)


def test_config_errors():
    with pytest.raises(ConfigError):
        generate_language_set(n_features=0)
    with pytest.raises(ConfigError):
        generate_language_set(p_in=0.7)


def test_language_set_is_deterministic():
    a, _ = generate_language_set(seed=5)
    b, _ = generate_language_set(seed=5)
    for p, q in zip(a, b):
        assert p.vector.tobytes() == q.vector.tobytes()
        assert p.surface_ids.tobytes() == q.surface_ids.tobytes()


def test_intra_family_closer_than_inter_family():
    intra_d, inter_d = [], []
    for seed in range(100):
        profiles, D = generate_language_set(seed=seed)
        intra, inter = family_pairs(profiles)
        intra_d += [D[a.language, b.language] for a, b in intra]
        inter_d += [D[a.language, b.language] for a, b in inter]
    assert np.mean(intra_d) < np.mean(inter_d)


def test_family_members_share_word_order():
    wins = 0
    for seed in range(100):
        profiles, _ = generate_language_set(seed=seed)
        intra, inter = family_pairs(profiles)
        same = lambda pairs: np.mean([a.word_order == b.word_order for a, b in pairs])
        wins += same(intra) > same(inter)
    assert wins / 100 >= 0.8


def test_surface_vocabulary_layout():
    profiles, _ = generate_language_set(seed=0)
    shared = set(np.flatnonzero(profiles[0].surface_ids < 2 + 5))
    assert len(shared) == 5  # 20% of 24 concepts
    private = [set(p.surface_ids.tolist()) - set(range(7)) for p in profiles]
    for a, b in itertools.combinations(private, 2):
        assert not a & b


def test_resource_ratios_cycle():
    profiles, _ = generate_language_set(base_resource=600)
    assert [p.resource_count for p in profiles] == [600, 450, 300, 150, 600, 450]


def test_identity_language_surface_equals_concepts():
    profiles, _ = generate_language_set(identity_surface=True, shared_fraction=0.0, seed=0)
    p = profiles[0]
    p = type(p)(p.language, p.family, np.zeros_like(p.vector), p.surface_ids - p.surface_ids.min(), 10)
    rng = np.random.default_rng(0)
    concepts = generate_concepts(5, (4, 9), 24, 4, rng)
    corpus = generate_corpus(p, TOKEN_TAG, 5, (4, 9), 0, concepts=concepts)
    for c, t in zip(concepts, corpus.tokens):
        np.testing.assert_array_equal(c, t)


def test_parallel_corpora_have_equal_tag_multisets():
    profiles, _ = generate_language_set(seed=1)
    a = generate_corpus(profiles[0], TOKEN_TAG, 50, (8, 12), seed=9)
    b = generate_corpus(profiles[4], TOKEN_TAG, 50, (8, 12), seed=9)
    for ya, yb in zip(a.labels, b.labels):
        assert Counter(ya.tolist()) == Counter(yb.tolist())
    assert not all(np.array_equal(x, y) for x, y in zip(a.tokens, b.tokens))


@pytest.mark.parametrize("task", [TOKEN_TAG, SENTENCE_CLASS])
def test_oracle_recovers_every_label(task):
    profiles, _ = generate_language_set(seed=2)
    for p in profiles:
        corpus = generate_corpus(p, task, 40, (8, 12), seed=4)
        for toks, y in zip(corpus.tokens, corpus.labels):
            concepts = p.unrealise(toks)
            if task == TOKEN_TAG:
                perm = order_permutation(len(concepts), p.word_order)
                np.testing.assert_array_equal(concept_tags(concepts, 4)[perm], y)
            else:
                assert sentence_class(concepts, 4) == y


def test_corpus_errors():
    profiles, _ = generate_language_set()
    with pytest.raises(InputError):
        generate_corpus(profiles[0], TOKEN_TAG, 0, (8, 12), 0)
    with pytest.raises(InputError):
        generate_corpus(profiles[0], "parse", 3, (8, 12), 0)


def make_corpus(n, lang="xx"):
    return Corpus(lang, TOKEN_TAG, [np.array([2 + i % 5]) for i in range(n)], [np.array([0])] * n)


def test_single_stage_is_whole_corpus():
    c = make_corpus(10)
    (only,) = partition_stages(c, 1, 0)
    assert sorted(int(t[0]) for t in only.tokens) == sorted(int(t[0]) for t in c.tokens)


def test_two_stages_split_evenly_and_disjointly():
    c = Corpus("xx", TOKEN_TAG, [np.array([i]) for i in range(100)], [np.array([0])] * 100)
    a, b = partition_stages(c, 2, 0)
    ia, ib = {int(t[0]) for t in a.tokens}, {int(t[0]) for t in b.tokens}
    assert len(ia) == len(ib) == 50 and not ia & ib and ia | ib == set(range(100))


def test_seeds_change_shards():
    c = Corpus("xx", TOKEN_TAG, [np.array([i]) for i in range(100)], [np.array([0])] * 100)
    digests = {partition_stages(c, 2, s)[0].digest() for s in range(10)}
    assert len(digests) == 10


def test_too_many_stages():
    with pytest.raises(InputError):
        partition_stages(make_corpus(3), 4, 0)


def test_multisource_single_language():
    batches = list(multisource_epoch({"xx": make_corpus(20)}, 4, np.random.default_rng(0)))
    assert len(batches) == 5 and {b.language for b in batches} == {"xx"}


def test_multisource_is_uniform_over_languages():
    corpora = {lang: Corpus(lang, TOKEN_TAG, [np.array([2])] * 30_000, [np.array([0])] * 30_000)
               for lang in ("a", "b", "c")}
    rng = np.random.default_rng(0)
    its = {lang: ShardIterator(c, 1) for lang, c in corpora.items()}
    counts = Counter(sample_multisource_batch(its, rng).language for _ in range(30_000))
    sigma = np.sqrt(30_000 * (1 / 3) * (2 / 3))
    assert all(abs(n - 10_000) <= 3 * sigma for n in counts.values())


def test_batches_never_mix_languages_and_end_of_epoch():
    corpora = {"a": make_corpus(7, "a"), "b": make_corpus(5, "b")}
    rng = np.random.default_rng(1)
    its = {lang: ShardIterator(c, 3) for lang, c in corpora.items()}
    seen = Counter()
    while True:
        try:
            batch = sample_multisource_batch(its, rng)
        except EndOfEpoch:
            break
        seen[batch.language] += len(batch.tokens)
    assert seen == {"a": 7, "b": 5}


def test_collate_pads_and_weights():
    c = Corpus("xx", TOKEN_TAG, [np.array([3, 4, 5]), np.array([6])], [np.array([1, 2, 3]), np.array([4])])
    b = collate(c)
    np.testing.assert_array_equal(b.tokens, [[3, 4, 5], [6, 0, 0]])
    np.testing.assert_array_equal(b.weights, [[1, 1, 1], [1, 0, 0]])
    np.testing.assert_array_equal(b.labels, [[1, 2, 3], [4, 0, 0]])


def test_benchmark_is_bitwise_deterministic(tiny_bench):
    again = build_benchmark(tiny_bench.spec)
    for split in ("train", "dev", "test"):
        for lang in tiny_bench.languages:
            assert getattr(again, split)[lang].digest() == getattr(tiny_bench, split)[lang].digest()


def test_reference_benchmark_shape():
    bench = build_benchmark(BenchmarkSpec(base_resource=600, dev_size=10, test_size=10))
    assert bench.languages == ["A1", "A2", "A3", "B1", "B2", "B3"]
    assert bench.resource_counts() == {"A1": 600, "A2": 450, "A3": 300, "B1": 150, "B2": 600, "B3": 450}
    assert bench.n_tags == 8


@pytest.mark.parametrize("task", [TOKEN_TAG, SENTENCE_CLASS])
def test_corpus_file_round_trip(task):
    profiles, _ = generate_language_set()
    c = generate_corpus(profiles[0], task, 12, (3, 6), 0)
    assert parse_corpus(format_corpus(c), task).digest() == c.digest()
