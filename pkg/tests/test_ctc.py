import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mandarin_e2e.ctc import (
    CtcDecodeConfig,
    CtcError,
    collapse,
    ctc_loss,
    ctc_loss_batch,
    fused_score,
    greedy_decode,
    min_frames,
    prefix_beam_search,
    syllable_to_char_transduce,
)
from mandarin_e2e.lm import LMError, NGramLM, score, train_lm, units_for
from mandarin_e2e.nnet.autograd import Tensor
from mandarin_e2e.units import Lexicon, UnitVocabulary

from .oracles import ctc_marginals, ctc_nll_by_enumeration, log_softmax, numeric_grad, rel_error

VOCAB = UnitVocabulary.from_units(list("ABC"), "Character", "CTC")
A, B, C, BLANK = 0, 1, 2, 3


def two_pass_collapse(path, blank):
    deduped = [k for i, k in enumerate(path) if i == 0 or k != path[i - 1]]
    return [k for k in deduped if k != blank]


def test_collapse_example():
    assert collapse([A, BLANK, A, A, BLANK, B], BLANK) == [A, A, B]
    assert collapse([BLANK] * 5, BLANK) == []
    assert collapse([], BLANK) == []


def test_collapse_matches_two_pass_oracle():
    for path in itertools.product(range(4), repeat=6):
        assert collapse(path, BLANK) == two_pass_collapse(list(path), BLANK)


def test_min_frames():
    assert min_frames([]) == 0
    assert min_frames([A, B]) == 2
    assert min_frames([A, A]) == 3
    assert min_frames([A, A, A, B, B]) == 8


def test_single_frame_loss():
    z = np.array([[0.3, -1.0, 2.0, 0.5]])
    nll, _ = ctc_loss(z, [B])
    assert nll == pytest.approx(-log_softmax(z)[0, B], abs=1e-12)


def test_uniform_two_frames_one_label():
    # |V|=2 plus blank: 9 paths, of which kk, k<b>, <b>k give label k
    nll, _ = ctc_loss(np.zeros((2, 3)), [0])
    assert math.exp(-nll) == pytest.approx(3 / 9, abs=1e-12)


def test_empty_target_is_all_blank_path():
    z = np.random.default_rng(0).normal(size=(5, 4))
    nll, _ = ctc_loss(z, [])
    assert nll == pytest.approx(-log_softmax(z)[:, BLANK].sum(), abs=1e-12)


@pytest.mark.parametrize("seed", range(40))
def test_loss_and_gradient_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 5))
    T = int(rng.integers(1, 7))
    n = int(rng.integers(0, 4))
    target = [int(k) for k in rng.integers(0, K - 1, size=n)]
    if min_frames(target) > T:
        target = target[: max(0, T // 2)]
    z = rng.normal(scale=2.0, size=(T, K))
    nll, grad = ctc_loss(z, target)
    assert nll == pytest.approx(ctc_nll_by_enumeration(z, target, K - 1), abs=1e-6)
    num = numeric_grad(lambda: ctc_loss(z, target)[0], z)
    assert rel_error(grad, num) < 1e-4


def test_unalignable_target_names_required_frames():
    with pytest.raises(CtcError, match="T=3"):
        ctc_loss(np.zeros((2, 4)), [A, A])
    with pytest.raises(CtcError):
        ctc_loss(np.zeros((3, 4)), [BLANK])
    with pytest.raises(CtcError):
        ctc_loss(np.array([[0.0, np.inf, 0, 0]]), [A])


@pytest.mark.parametrize("T,K", [(1, 2), (3, 3), (4, 4), (2, 4)])
def test_marginals_sum_to_one(T, K):
    z = np.random.default_rng(T * 10 + K).normal(scale=3, size=(T, K))
    marg = ctc_marginals(z, K - 1)
    assert math.fsum(math.exp(v) for v in marg.values()) == pytest.approx(1.0, abs=1e-9)
    for y, lp in marg.items():
        assert -ctc_loss(z, list(y))[0] == pytest.approx(lp, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(3)))
def test_loss_is_permutation_covariant(seed, perm):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=2, size=(7, 4))
    target = [int(k) for k in rng.integers(0, 3, size=3)]
    # relabel non-blank columns; blank stays last
    cols = list(perm) + [3]
    z2 = np.empty_like(z)
    z2[:, cols] = z
    t2 = [perm[k] for k in target]
    assert ctc_loss(z2, t2)[0] == pytest.approx(ctc_loss(z, target)[0], abs=1e-10)


def test_batch_loss_sums_utterances_and_backprops():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(2, 5, 4))
    targets, lengths = [[A, B], [C]], [5, 3]
    t = Tensor(z.copy(), requires_grad=True)
    out = ctc_loss_batch(t, targets, lengths)
    expect = ctc_loss(z[0], targets[0])[0] + ctc_loss(z[1, :3], targets[1])[0]
    assert float(out.data) == pytest.approx(expect, abs=1e-12)
    out.backward()
    np.testing.assert_allclose(t.grad[0], ctc_loss(z[0], targets[0])[1])
    np.testing.assert_allclose(t.grad[1, :3], ctc_loss(z[1, :3], targets[1])[1])
    assert np.all(t.grad[1, 3:] == 0)


def test_greedy_examples():
    z = np.full((4, 4), -5.0)
    z[:, BLANK] = 5
    assert greedy_decode(z) == []
    z = np.full((4, 4), -5.0)
    for t, k in enumerate([A, A, BLANK, B]):
        z[t, k] = 5
    assert greedy_decode(z) == [A, B]
    assert greedy_decode(np.zeros((3, 4))) == [A]


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 10), st.just(4)), elements=st.floats(-5, 5)))
def test_greedy_is_collapse_of_argmax_path(z):
    path = [int(np.argmax(row)) for row in z]
    assert greedy_decode(z) == two_pass_collapse(path, BLANK)


def test_beam_one_matches_greedy_on_peaked_posteriors():
    rng = np.random.default_rng(0)
    for _ in range(20):
        path = rng.integers(0, 4, size=8)
        z = rng.normal(scale=0.1, size=(8, 4))
        z[np.arange(8), path] += 12
        hyp = prefix_beam_search(z, CtcDecodeConfig(beam_width=1))[0]
        assert list(hyp.units) == greedy_decode(z)


@pytest.mark.parametrize("seed", range(15))
def test_full_beam_finds_exhaustive_argmax(seed):
    rng = np.random.default_rng(seed)
    T, K = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    z = rng.normal(scale=2, size=(T, K))
    marg = ctc_marginals(z, K - 1)
    best = max(marg, key=marg.get)
    hyp = prefix_beam_search(z, CtcDecodeConfig(beam_width=K**T))[0]
    assert hyp.units == best
    assert hyp.acoustic == pytest.approx(marg[best], abs=1e-9)
    assert hyp.total == hyp.acoustic and hyp.count == len(best)


def test_word_count_dominance():
    z = np.array([[3.0, 0.0, -1.0], [-1.0, 0.0, 3.0]])
    assert len(prefix_beam_search(z, CtcDecodeConfig(beam_width=9))[0].units) == 1
    assert len(prefix_beam_search(z, CtcDecodeConfig(beam_width=9, beta=50.0))[0].units) == 2


def test_lm_dominance():
    lm = train_lm([["B", "A"]] * 200, order=3, units=units_for(VOCAB))
    z = np.full((4, 4), -3.0)
    # acoustics slightly prefer "A B"
    z[0, A], z[1, BLANK], z[2, B], z[3, BLANK] = 2.2, 2.0, 2.2, 2.0
    z[0, B] += 4.9
    z[2, A] += 4.9
    no_lm = prefix_beam_search(z, CtcDecodeConfig(beam_width=16), VOCAB)[0]
    assert no_lm.units == (A, B)
    fused = prefix_beam_search(z, CtcDecodeConfig(beam_width=16, alpha=1.0, lm=lm), VOCAB)[0]
    assert fused.units == (B, A)
    assert fused.lm == pytest.approx(score(lm, ["B", "A"]), abs=1e-12)


def _hyps_by_units(z, **kw):
    return {h.units: h for h in prefix_beam_search(z, CtcDecodeConfig(beam_width=4**4, n_best=10**4, **kw), VOCAB)}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1), st.floats(-1, 1))
def test_fused_score_is_linear_in_weights(seed, alpha, delta, beta, dbeta):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4, 4))
    lm = train_lm([list("ABCA"), list("BB")], order=2, units=units_for(VOCAB))
    base = _hyps_by_units(z, alpha=alpha, beta=beta, lm=lm)
    moved = _hyps_by_units(z, alpha=alpha + delta, beta=beta + dbeta, lm=lm)
    assert base.keys() == moved.keys()
    for y, h in base.items():
        assert h.total == pytest.approx(fused_score(h.acoustic, h.lm, h.count, alpha, beta), abs=1e-9)
        g = moved[y]
        assert g.acoustic == h.acoustic and g.lm == h.lm
        assert g.total - h.total == pytest.approx(delta * h.lm + dbeta * h.count, abs=1e-9)


@pytest.mark.parametrize("use_lm", [False, True])
def test_exhaustive_beam_dominates_every_narrower_beam(use_lm):
    # pruned beams hold only part of a prefix's path mass, so their scores are lower bounds
    lm = train_lm([list("ABCA"), list("CB")], order=3, units=units_for(VOCAB)) if use_lm else None
    kw = dict(alpha=0.7, beta=0.3, lm=lm) if use_lm else {}
    for seed in range(60):
        rng = np.random.default_rng(seed)
        z = rng.normal(scale=2, size=(int(rng.integers(2, 6)), 4))
        exact = prefix_beam_search(z, CtcDecodeConfig(beam_width=4 ** z.shape[0], **kw), VOCAB)[0]
        for width in range(1, 8):
            h = prefix_beam_search(z, CtcDecodeConfig(beam_width=width, **kw), VOCAB)[0]
            assert h.total <= exact.total + 1e-9
            true_ac = -ctc_loss(z, list(h.units))[0]
            assert h.acoustic <= true_ac + 1e-9


def test_decode_config_and_lm_errors():
    with pytest.raises(CtcError):
        CtcDecodeConfig(beam_width=0)
    with pytest.raises(CtcError):
        CtcDecodeConfig(alpha=math.nan)
    other = train_lm([["X"]], order=2, units=["X", "Y", "Z"])
    with pytest.raises(LMError):
        prefix_beam_search(np.zeros((2, 4)), CtcDecodeConfig(lm=other, alpha=1), VOCAB)
    with pytest.raises(CtcError):
        prefix_beam_search(np.zeros((2, 4)), CtcDecodeConfig(lm=other, alpha=1))


def test_n_best_is_sorted():
    z = np.random.default_rng(3).normal(size=(5, 4))
    hyps = prefix_beam_search(z, CtcDecodeConfig(beam_width=8, n_best=5))
    assert len(hyps) == 5
    assert [h.total for h in hyps] == sorted((h.total for h in hyps), reverse=True)


# syllable to character transduction

LEX = Lexicon(
    [("妈", "ma1"), ("麻", "ma2"), ("马", "ma3"), ("骂", "ma4"), ("吗", "ma5"),
     ("他", "ta1"), ("她", "ta1"), ("它", "ta1"), ("是", "shi4"), ("事", "shi4"), ("市", "shi4")]
)
CHARS = list(LEX)


def test_transduce_single_homophones():
    lm = NGramLM.uniform(CHARS)
    assert syllable_to_char_transduce(["ma1", "ma3"], LEX, lm) == "妈马"


def test_transduce_uniform_lm_takes_first_candidates():
    lm = NGramLM.uniform(CHARS)
    assert syllable_to_char_transduce(["ta1", "shi4", "ta1"], LEX, lm) == "他是他"


@pytest.mark.parametrize("seed", range(6))
def test_transduce_matches_product_enumeration(seed):
    rng = np.random.default_rng(seed)
    corpus = [[CHARS[int(i)] for i in rng.integers(0, len(CHARS), size=4)] for _ in range(8)]
    lm = train_lm(corpus, order=3, units=CHARS)
    sylls = ["ta1", "shi4", "ta1"]
    rev = LEX.homophones()
    options = [rev[s] for s in sylls]
    best = max(itertools.product(*options), key=lambda cs: score(lm, list(cs)))
    assert syllable_to_char_transduce(sylls, LEX, lm, beam_width=27) == "".join(best)


def test_transduce_unknown_syllable():
    with pytest.raises(CtcError, match="zhuang1"):
        syllable_to_char_transduce(["zhuang1"], LEX, NGramLM.uniform(CHARS))
