import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mandarin_e2e.scoring import ScoringError, align_counts, cer, corpus_report

from .oracles import edit_distance

seqs = st.lists(st.sampled_from("abcd"), max_size=10)


def test_identical_is_zero():
    assert cer("今天天气", "今天天气").cer == 0.0


def test_single_deletion():
    r = cer("abcd", "abd")
    assert (r.substitutions, r.deletions, r.insertions) == (0, 1, 0)
    assert r.cer == 0.25


def test_insertions_can_push_rate_above_one():
    assert cer("a", "bcd").cer == 3.0


def test_empty_reference_rejected():
    with pytest.raises(ScoringError):
        cer("", "abc")


def test_substitution_preferred_on_ties():
    # two substitutions or one deletion plus one insertion both cost 2
    assert align_counts("ab", "ba") == (2, 0, 0)
    assert align_counts("ab", "") == (0, 2, 0)
    assert align_counts("", "ab") == (0, 0, 2)


@settings(max_examples=300, deadline=None)
@given(seqs, seqs)
def test_edit_counts_match_recursive_oracle(ref, hyp):
    s, d, i = align_counts(ref, hyp)
    assert s + d + i == edit_distance(ref, hyp)
    # the alignment must be consistent with both lengths
    assert len(ref) - d + i == len(hyp)
    assert min(s, d, i) >= 0


def test_deterministic():
    assert align_counts("abcabba", "cbabac") == align_counts("abcabba", "cbabac")


def test_three_utterance_fixture():
    report = corpus_report([
        ("u1", "今天天气", "今天气"),
        ("u2", "你好", "你好吗"),
        ("u3", "我爱北京", "我爱南京"),
    ])
    assert (report.substitutions, report.deletions, report.insertions) == (1, 1, 1)
    assert report.ref_length == 10
    assert report.cer == pytest.approx(0.3)
    mean_of_rates = sum(u.cer for u in report.utterances.values()) / 3
    assert mean_of_rates == pytest.approx(1 / 3)
    assert report.summary().startswith("CER 30.00%")


def test_all_correct_corpus():
    assert corpus_report([("a", "xy", "xy"), ("b", "z", "z")]).cer == 0.0


def test_corpus_errors():
    with pytest.raises(ScoringError):
        corpus_report([("a", "x", "x"), ("a", "y", "y")])
    with pytest.raises(ScoringError):
        corpus_report([]).cer
