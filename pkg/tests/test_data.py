import hashlib
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gvrt.data import (BOS, EOS, UNK, SynthSpec, build_split_plan, build_vocabulary, decode_tokens, draw_nuisance,
                       encode_text, generate_synthetic_dataset, load_dataset, make_batches,
                       render_canonical, save_dataset, tokenize)
from gvrt.errors import ConfigError


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic_dataset(SynthSpec(num_classes=4, num_domains=4, samples_per_class=12, seed=3))


def test_counting():
    ds = generate_synthetic_dataset(SynthSpec(num_classes=2, num_domains=2, samples_per_class=4))
    assert len(ds) == 16
    assert len(ds.ids) == 8
    ds.check_invariants()


def test_identity_domain_is_canonical_rendering():
    spec = SynthSpec(num_classes=3, num_domains=2, samples_per_class=3, seed=5, transforms=["identity", "noise"])
    ds = generate_synthetic_dataset(spec)
    for i in ds.ids:
        s = ds.get(i, 0)
        attrs = ds.class_attributes[s.label]
        canon = render_canonical(attrs, draw_nuisance(spec.seed, i), spec.image_size).astype(np.float32)
        assert s.image.tobytes() == canon.tobytes()
        assert s.label == ds.get(i, 1).label


def test_same_seed_byte_identical():
    a = generate_synthetic_dataset(SynthSpec(num_classes=10, num_domains=4, samples_per_class=6, seed=7))
    b = generate_synthetic_dataset(SynthSpec(num_classes=10, num_domains=4, samples_per_class=6, seed=7))
    assert hashlib.sha256(a.images.tobytes()).hexdigest() == hashlib.sha256(b.images.tobytes()).hexdigest()
    c = generate_synthetic_dataset(SynthSpec(num_classes=10, num_domains=4, samples_per_class=6, seed=8))
    assert a.images.tobytes() != c.images.tobytes()


def test_invalid_specs():
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SynthSpec(num_classes=1))
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SynthSpec(num_domains=1))
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SynthSpec(image_size=8))
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SynthSpec(num_classes=500))


def test_sentences_name_class_attributes(small_ds):
    for k, (shape, color, pattern) in enumerate(small_ds.class_attributes):
        sent = small_ds.class_sentences[k].split()
        assert shape in sent and color in sent and pattern in sent
    assert len(set(small_ds.class_sentences)) == small_ds.num_classes
    for i in small_ds.ids:
        shape, color, pattern = small_ds.class_attributes[small_ds.label_of(i)]
        for t in small_ds.texts_of(i):
            assert {shape, color, pattern} <= set(t.split())


def test_sibling_consistency(small_ds):
    small_ds.check_invariants()
    assert small_ds.images.min() >= 0 and small_ds.images.max() <= 1


def test_save_load_roundtrip(small_ds, tmp_path):
    save_dataset(small_ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.images, small_ds.images)
    assert back.domain_names == small_ds.domain_names
    assert [s.texts for s in back.samples] == [s.texts for s in small_ds.samples]
    assert [s.label for s in back.samples] == [s.label for s in small_ds.samples]


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def check_plan(ds, plan):
    """Returns the number of invariant violations."""
    bad = 0
    srcs = plan.source_domains
    if plan.mode == "multi-source":
        for a in range(len(srcs)):
            for b in range(a + 1, len(srcs)):
                bad += len(set(plan.train[srcs[a]]) & set(plan.train[srcs[b]]))
    test = {i for ids in plan.test.values() for i in ids}
    for d in srcs:
        tr, va = set(plan.train[d]), set(plan.val[d])
        bad += len(tr & va) + len(tr & test) + len(va & test)
    for t in plan.target_domains:
        assert t not in srcs
    return bad


def test_split_protocol_property_100_pairs():
    rnd = random.Random(0)
    violations = 0
    for trial in range(100):
        spec = SynthSpec(num_classes=rnd.randint(2, 6), num_domains=rnd.randint(2, 4),
                         samples_per_class=rnd.randint(6, 15), seed=rnd.randint(0, 10**6), image_size=16)
        ds = generate_synthetic_dataset(spec)
        target = rnd.randrange(spec.num_domains)
        plan = build_split_plan(ds, "multi-source", [target], seed=rnd.randint(0, 10**6))
        violations += check_plan(ds, plan)
        # train/val/test partition the pool of each source domain
        for d in plan.source_domains:
            g = plan.source_groups[d]
            pool = {i for i, gg in plan.groups.items() if gg in g}
            assert set(plan.train[d]) | set(plan.val[d]) == pool
    assert violations == 0


def test_cub_shape_groups_bijective(small_ds):
    plan = build_split_plan(small_ds, "multi-source", ["photo"])
    assert len(plan.source_domains) == 3
    assert sorted(g for gs in plan.source_groups.values() for g in gs) == [0, 1, 2]


def test_single_source_uses_all_groups(small_ds):
    plan = build_split_plan(small_ds, "single-source", [1, 2, 3])
    (src,) = plan.source_domains
    assert plan.source_groups[src] == [0, 1, 2]
    assert set(plan.train[src]) | set(plan.val[src]) == set(plan.groups)
    assert check_plan(small_ds, plan) == 0


def test_split_errors():
    ds = generate_synthetic_dataset(SynthSpec(num_classes=2, num_domains=5, samples_per_class=6))
    with pytest.raises(ConfigError):
        build_split_plan(ds, "multi-source", [0])  # four sources
    with pytest.raises(ConfigError):
        build_split_plan(ds, "single-source", [0])
    with pytest.raises(ConfigError):
        build_split_plan(ds, "multi-source", ["nowhere"])


def test_groups_stratified_by_class(small_ds):
    plan = build_split_plan(small_ds, "multi-source", [0], seed=11)
    for g in range(3):
        counts = np.bincount([small_ds.label_of(i) for i, gg in plan.groups.items() if gg == g],
                             minlength=small_ds.num_classes)
        assert counts.max() - counts.min() <= 1


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def test_vocab_examples():
    v = build_vocabulary(["a b", "a"], min_freq=1)
    assert len(v) == 6 and v.stoi["a"] == 4 and v.stoi["b"] == 5
    v2 = build_vocabulary(["a b", "a"], min_freq=2)
    assert len(v2) == 5 and "b" not in v2.stoi
    assert encode_text(v, "a b") == [BOS, 4, 5, EOS]
    assert encode_text(v, "a zebra") == [BOS, 4, UNK, EOS]
    assert len(build_vocabulary(["x y"], min_freq=5)) == 4


def test_vocab_order_independent():
    corpus = ["the red circle", "a blue square with dots", "the red square", "dots dots"]
    ref = build_vocabulary(corpus).itos
    rnd = random.Random(1)
    for _ in range(20):
        c = corpus[:]
        rnd.shuffle(c)
        assert build_vocabulary(c).itos == ref


WORDS = ["red", "green", "circle", "square", "with", "a", "striped", "fill", "this", "is"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=12))
def test_encode_decode_roundtrip(words):
    vocab = build_vocabulary([" ".join(WORDS)])
    s = " ".join(words)
    assert decode_tokens(vocab, encode_text(vocab, s)) == s


def test_tokenize_lowercases():
    assert tokenize("This IS  a Test") == ["this", "is", "a", "test"]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def test_batches_per_domain_and_deterministic(small_ds):
    plan = build_split_plan(small_ds, "multi-source", [0])
    vocab = build_vocabulary([t for i in small_ds.ids for t in small_ds.texts_of(i)])
    s1 = make_batches(small_ds, plan, 5, seed=2, vocab=vocab)
    s2 = make_batches(small_ds, plan, 5, seed=2, vocab=vocab)
    for _ in range(6):
        b1, b2 = next(s1), next(s2)
        assert len(b1) == 15
        assert np.bincount(b1.domains.numpy()).tolist()[1:] == [5, 5, 5]
        assert b1.ids.tolist() == b2.ids.tolist()
        assert b1.sentences == b2.sentences
        assert not b1.meta["wrapped"]


def test_batch_96_for_three_sources():
    ds = generate_synthetic_dataset(SynthSpec(num_classes=4, num_domains=4, samples_per_class=60, image_size=16))
    plan = build_split_plan(ds, "multi-source", [3])
    b = next(make_batches(ds, plan, 32))
    assert len(b) == 96


def test_per_class_text_mode(small_ds):
    plan = build_split_plan(small_ds, "multi-source", [0])
    vocab = build_vocabulary([t for i in small_ds.ids for t in small_ds.texts_of(i)] + small_ds.class_sentences)
    b = next(make_batches(small_ds, plan, 8, vocab=vocab, text_mode="per-class"))
    by_label = {}
    for y, row in zip(b.labels.tolist(), b.tokens.tolist()):
        by_label.setdefault(y, set()).add(tuple(row))
    assert all(len(v) == 1 for v in by_label.values())


def test_wraparound_flagged(small_ds):
    plan = build_split_plan(small_ds, "multi-source", [0])
    b = next(make_batches(small_ds, plan, 500))
    assert b.meta["wrapped"] and len(b) == 1500
