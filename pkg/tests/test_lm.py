import itertools
import math
import random

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mandarin_e2e.lm import (
    DISCOUNT,
    LMError,
    NGramLM,
    fingerprint_of,
    perplexity,
    score,
    score_step,
    train_lm,
)

from .oracles import arpa_sentence_logprob, arpa_tables

UNITS = list("ABCDE")


def random_corpus(seed, n=12, units=UNITS, max_len=7):
    r = random.Random(seed)
    return [[r.choice(units) for _ in range(r.randint(0, max_len))] for _ in range(n)]


def test_order1_hand_example():
    # top-order counts A=2 B=1 </s>=1, N=4; leftover 0.75*3/4 spread over {A, B, </s>}
    lm = train_lm([["A", "A", "B"]], order=1)
    d = lm.distribution([])
    gamma = DISCOUNT * 3 / 4
    assert d["A"] == pytest.approx((2 - DISCOUNT) / 4 + gamma / 3, abs=1e-12)
    assert d["B"] == pytest.approx((1 - DISCOUNT) / 4 + gamma / 3, abs=1e-12)
    assert d["</s>"] == pytest.approx((1 - DISCOUNT) / 4 + gamma / 3, abs=1e-12)
    assert (d["A"], d["B"], d["</s>"]) == pytest.approx((0.5, 0.25, 0.25), abs=1e-12)
    assert d["A"] > d["B"]
    assert sum(d.values()) == pytest.approx(1.0, abs=1e-12)


def test_bigram_hand_example():
    # corpus "A B": continuation counts give P_uni = (A:1, B:1, </s>:1) after discounting
    lm = train_lm([["A", "B"]], order=2)
    V = 3
    uni = {w: (1 - DISCOUNT) / 3 + DISCOUNT * 3 / 3 / V for w in ("A", "B", "</s>")}
    # context A: single successor B, raw count 1
    pB = (1 - DISCOUNT) / 1 + DISCOUNT * 1 / 1 * uni["B"]
    d = lm.distribution(["A"])
    assert d["B"] == pytest.approx(pB, abs=1e-12)
    assert d["A"] == pytest.approx(DISCOUNT * uni["A"], abs=1e-12)
    assert sum(d.values()) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
@pytest.mark.parametrize("seed", range(3))
def test_normalized_at_every_context(order, seed):
    lm = train_lm(random_corpus(seed), order=order, units=UNITS)
    for n in range(order):
        for ctx in itertools.product(UNITS, repeat=n):
            d = lm.distribution(list(ctx))
            assert sum(d.values()) == pytest.approx(1.0, abs=1e-9)
            assert all(0 < p <= 1 for p in d.values())


def test_normalized_with_fifty_units():
    units = [f"u{i}" for i in range(50)]
    lm = train_lm(random_corpus(7, n=60, units=units, max_len=10), order=3, units=units)
    r = random.Random(0)
    for _ in range(40):
        ctx = [r.choice(units) for _ in range(r.randint(0, 3))]
        assert sum(lm.distribution(ctx).values()) == pytest.approx(1.0, abs=1e-6)


def test_training_sentence_beats_unseen_permutations():
    sent = list("ABCDE")
    lm = train_lm([sent], order=3, units=UNITS)
    s0 = score(lm, sent)
    for perm in itertools.permutations(sent):
        if list(perm) != sent:
            assert s0 > score(lm, list(perm))


def test_empty_sequence_is_boundary_only():
    lm = train_lm(random_corpus(1), order=3, units=UNITS)
    assert score(lm, []) == pytest.approx(math.log(lm.distribution([])["</s>"]), abs=1e-12)


@pytest.mark.parametrize("order", [1, 2, 4])
def test_matches_arpa_backoff_oracle(order):
    lm = train_lm(random_corpus(11, n=20), order=order, units=UNITS)
    n, tables = arpa_tables(lm.to_arpa())
    assert n == order
    r = random.Random(order)
    for _ in range(50):
        s = [r.choice(UNITS) for _ in range(r.randint(0, 8))]
        # ARPA stores 6 decimals of log10
        assert score(lm, s) == pytest.approx(arpa_sentence_logprob(order, tables, s), abs=1e-4 * (len(s) + 1))


def test_arpa_export_is_stable():
    a = train_lm(random_corpus(2), order=3, units=UNITS).to_arpa()
    b = train_lm(random_corpus(2), order=3, units=UNITS).to_arpa()
    assert a == b
    assert a.startswith("\\data\\\nngram 1=")
    assert a.rstrip().endswith("\\end\\")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4), st.lists(st.sampled_from(UNITS), max_size=10))
def test_score_equals_sum_of_steps(seed, order, seq):
    lm = train_lm(random_corpus(seed), order=order, units=UNITS)
    state, total = lm.initial_state(), 0.0
    for u in seq:
        lp, state = score_step(lm, state, u)
        total += lp
    total += lm.logprob_ids(state, lm.eos_id)
    assert total == pytest.approx(score(lm, seq), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 10**6),
    st.integers(2, 4),
    st.lists(st.sampled_from(UNITS), max_size=6),
    st.lists(st.sampled_from(UNITS), max_size=6),
    st.lists(st.sampled_from(UNITS), min_size=3, max_size=3),
    st.sampled_from(UNITS),
)
def test_markov_property(seed, order, hist_a, hist_b, tail, w):
    lm = train_lm(random_corpus(seed), order=order, units=UNITS)

    def run(seq):
        state = lm.initial_state()
        for u in seq:
            _, state = score_step(lm, state, u)
        return state

    sa, sb = run(hist_a + tail), run(hist_b + tail)
    assert sa == sb
    assert len(sa) == order - 1
    assert score_step(lm, sa, w)[0] == score_step(lm, sb, w)[0]


def test_uniform_perplexity_is_vocabulary_size():
    lm = NGramLM.uniform(UNITS)
    data = random_corpus(0, n=200)
    # the uniform model also predicts </s>, so V counts it
    assert perplexity(lm, data) == pytest.approx(len(UNITS) + 1, rel=1e-2)


def test_training_perplexity_beats_uniform():
    data = random_corpus(3, n=30)
    lm = train_lm(data, order=3, units=UNITS)
    assert perplexity(lm, data) <= perplexity(NGramLM.uniform(UNITS), data)


def test_heldout_with_novel_ngrams_is_finite():
    lm = train_lm([list("ABAB"), list("CDCD")], order=3, units=UNITS)
    held = [list("ADBEC"), list("EEEE")]
    assert math.isfinite(perplexity(lm, held))


def test_errors():
    with pytest.raises(LMError):
        train_lm([], order=2)
    with pytest.raises(LMError):
        train_lm([["A"]], order=0)
    lm = train_lm([["A"]], order=2, units=UNITS)
    with pytest.raises(LMError):
        score(lm, ["Z"])
    with pytest.raises(LMError):
        score(lm, ["A"], fingerprint=fingerprint_of(list("XYZ")))
    assert score(lm, ["A"], fingerprint=fingerprint_of(UNITS)) == score(lm, ["A"])
    with pytest.raises(LMError):
        perplexity(lm, [])


def test_binary_round_trip(tmp_path):
    lm = train_lm(random_corpus(5), order=4, units=UNITS)
    lm.save(tmp_path / "lm.bin")
    back = NGramLM.load(tmp_path / "lm.bin")
    assert back.fingerprint == lm.fingerprint and back.order == 4
    assert back.to_arpa() == lm.to_arpa()
    for s in random_corpus(9):
        assert score(back, s) == score(lm, s)
    (tmp_path / "bad.bin").write_bytes(b"JUNK" + (tmp_path / "lm.bin").read_bytes()[4:])
    with pytest.raises(LMError):
        NGramLM.load(tmp_path / "bad.bin")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.sampled_from(UNITS), max_size=6))
def test_adding_a_sentence_never_lowers_its_score_at_order1(seed, sent):
    corpus = random_corpus(seed, n=6)
    # absolute discounting takes 0.75 from a brand-new singleton type; see the exception test below
    assume(set(sent) <= {u for s in corpus for u in s})
    before = score(train_lm(corpus, 1, UNITS), sent)
    after = score(train_lm(corpus + [sent], 1, UNITS), sent)
    assert after >= before - 1e-12


def test_monotone_data_exception_for_new_types():
    corpus, sent = [["C"]], list("BCDA")
    before = score(train_lm(corpus, 1, list("ABCD")), sent)
    after = score(train_lm(corpus + [sent], 1, list("ABCD")), sent)
    assert after < before


@pytest.mark.parametrize("order", [2, 3, 4])
def test_adding_a_sentence_never_lowers_its_score_higher_orders(order):
    for seed in range(300):
        r = random.Random(seed)
        corpus = random_corpus(seed, n=r.randint(1, 6), units=list("ABC"), max_len=6)
        sent = [r.choice("ABC") for _ in range(r.randint(0, 6))]
        before = score(train_lm(corpus, order, list("ABC")), sent)
        after = score(train_lm(corpus + [sent], order, list("ABC")), sent)
        assert after >= before - 1e-12


def test_distribution_ids_match_names():
    lm = train_lm(random_corpus(4), order=2, units=UNITS)
    probs = np.array([math.exp(lm.logprob_ids((lm.bos_id,), w)) for w in range(lm.num_predicted)])
    d = lm.distribution([])
    np.testing.assert_allclose(probs, [d[u] for u in UNITS + ["</s>"]], rtol=1e-14)
