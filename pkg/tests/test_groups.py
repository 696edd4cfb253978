import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from statetrack.errors import ConfigError, ResourceError
from statetrack.groups import (
    Batch, build_group, check_group_axioms, closure, enumerate_return_words, running_product, sample_batch,
)

NAMES = ["C2", "C3", "C6", "S3", "C2xC4", "A4", "C5", "C7"]


@pytest.mark.parametrize("name", NAMES)
def test_axioms_hold(name):
    g = build_group(name)
    check_group_axioms(g)
    assert sorted(closure(g, g.generators)) == list(range(g.order))
    for row in g.table:
        assert sorted(row) == list(range(g.order))


def test_unknown_group():
    with pytest.raises(ConfigError):
        build_group("D17x")


def test_s3_labels_and_table_entry():
    s3 = build_group("S3")
    assert s3.labels == ("e", "(12)", "(13)", "(23)", "(123)", "(132)")
    assert s3.mul(s3.element("(12)"), s3.element("(23)")) == s3.element("(123)")


def test_small_cyclic_entries():
    assert build_group("C2").mul(1, 1) == 0
    assert build_group("C3").mul(1, 2) == 0


def test_s3_non_abelian():
    s3 = build_group("S3")
    a, b = s3.element("(12)"), s3.element("(23)")
    assert s3.mul(a, b) != s3.mul(b, a)


def test_running_product_s3_example():
    s3 = build_group("S3")
    seq = [s3.element(x) for x in ("(12)", "(23)", "(12)")]
    out = running_product(s3, seq)
    assert [s3.labels[i] for i in out] == ["(12)", "(123)", "(13)"]


def test_running_product_c2_example():
    assert running_product(build_group("C2"), [1, 1, 0]).tolist() == [1, 0, 0]


@pytest.mark.parametrize("name", NAMES)
def test_identity_tokens_keep_start(name):
    g = build_group(name)
    for g0 in range(g.order):
        assert (running_product(g, [g.identity] * 5, g0) == g0).all()


def test_running_product_rejects_bad_tokens():
    with pytest.raises(IndexError):
        running_product(build_group("C2"), [0, 2])


def test_a4_and_product_orders():
    assert build_group("A4").order == 12
    assert build_group("C2xC4").order == 8


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(NAMES), st.lists(st.integers(0, 11), min_size=1, max_size=12),
       st.lists(st.integers(0, 11), min_size=1, max_size=12))
def test_concatenation_consistency(name, s1, s2):
    g = build_group(name)
    s1 = [x % g.order for x in s1]
    s2 = [x % g.order for x in s2]
    full = running_product(g, s1 + s2)
    head = running_product(g, s1)
    assert (full[: len(s1)] == head).all()
    assert (full[len(s1):] == running_product(g, s2, head[-1])).all()


def test_sample_batch_deterministic_bytes():
    g = build_group("S3")
    a = sample_batch(g, 10000, 2, 7)
    b = sample_batch(g, 10000, 2, 7)
    assert a.to_bytes() == b.to_bytes()
    back = Batch.from_bytes(a.to_bytes())
    assert (back.tokens == a.tokens).all() and (back.labels == a.labels).all()


def test_sample_batch_uniform_chi_square():
    g = build_group("S3")
    b = sample_batch(g, 20000, 3, 11)
    counts = np.bincount(b.tokens.ravel(), minlength=g.order)
    assert stats.chisquare(counts).pvalue > 1e-3
    expected = b.tokens.size / g.order
    sd = np.sqrt(expected * (1 - 1 / g.order))
    assert np.all(np.abs(counts - expected) <= 3 * sd)


def test_c2_length_one_labels_equal_tokens():
    b = sample_batch(build_group("C2"), 50, 1, 3)
    assert (b.tokens == b.labels).all()


def test_generators_only_sampling():
    g = build_group("S3")
    b = sample_batch(g, 200, 4, 0, generators_only=True)
    assert set(np.unique(b.tokens)) <= set(g.generators)


def test_batch_csv_rows():
    b = sample_batch(build_group("C3"), 2, 3, 0)
    lines = b.to_csv().splitlines()
    assert lines[0] == "sequence,step,token,label"
    assert len(lines) == 1 + 6


def _brute_return_words(g, max_len):
    return sorted(
        (w for k in range(1, max_len + 1) for w in itertools.product(range(g.order), repeat=k) if g.product(w) == g.identity),
        key=lambda w: (len(w), w),
    )


def test_return_words_c2():
    assert set(enumerate_return_words(build_group("C2"), 2)) == {(0,), (0, 0), (1, 1)}


def test_return_words_s3_length_two():
    g = build_group("S3")
    words = enumerate_return_words(g, 2)
    assert words == _brute_return_words(g, 2)
    assert {w for w in words if len(w) == 2} == {(x, g.inverse(x)) for x in range(6)}


def test_return_word_count_c3():
    words = enumerate_return_words(build_group("C3"), 3)
    # brute force over 3 + 9 + 27 words; frozen count 1 + 3 + 9
    assert len(words) == 13
    assert words == _brute_return_words(build_group("C3"), 3)


@pytest.mark.parametrize("name", ["C2", "C3", "S3", "C2xC4"])
def test_return_words_fix_every_start(name):
    g = build_group(name)
    for w in enumerate_return_words(g, 3):
        for g0 in range(g.order):
            assert running_product(g, list(w), g0)[-1] == g0


def test_return_word_guard():
    with pytest.raises(ResourceError):
        enumerate_return_words(build_group("C2"), 9)
    with pytest.raises(ResourceError):
        enumerate_return_words(build_group("A4"), 8)
