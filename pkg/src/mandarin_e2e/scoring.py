"""Character (or phone) error rate from a unit-cost Levenshtein alignment."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence


class ScoringError(ValueError):
    pass


@dataclass
class EvalReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0
    utterances: dict[str, "EvalReport"] = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def cer(self) -> float:
        if self.ref_length == 0:
            raise ScoringError("error rate undefined for an empty reference")
        return self.errors / self.ref_length

    def summary(self) -> str:
        return (
            f"CER {100 * self.cer:.2f}% [ {self.errors} / {self.ref_length}, "
            f"{self.substitutions} sub, {self.deletions} del, {self.insertions} ins ]"
        )


def align_counts(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) on a minimal-cost alignment.

    Backtracking prefers a diagonal move, then an insertion, then a deletion,
    among moves that stay on an optimal path.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(
                d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                d[i][j - 1] + 1,
                d[i - 1][j] + 1,
            )
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dl += 1
            i -= 1
    return s, dl, ins


def cer(reference: Sequence, hypothesis: Sequence) -> EvalReport:
    if len(reference) == 0:
        raise ScoringError("reference must be non-empty")
    s, d, i = align_counts(reference, hypothesis)
    return EvalReport(s, d, i, len(reference))


def corpus_report(pairs: Iterable[tuple[str, Sequence, Sequence]]) -> EvalReport:
    """Pool per-utterance counts; the corpus rate is total errors over total reference length."""
    total = EvalReport()
    for utt_id, ref, hyp in pairs:
        if utt_id in total.utterances:
            raise ScoringError(f"duplicate utterance id {utt_id!r}")
        r = cer(ref, hyp)
        total.utterances[utt_id] = r
        total.substitutions += r.substitutions
        total.deletions += r.deletions
        total.insertions += r.insertions
        total.ref_length += r.ref_length
    return total
