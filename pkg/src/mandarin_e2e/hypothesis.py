from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Hypothesis:
    """A finished decode with its score components kept separate.

    ``acoustic`` is log P_CTC or log P_Att, ``lm`` the natural-log LM score
    including the sentence end, ``count`` the number of emitted units.
    Attention decodes also fill ``coverage``, ``normalized`` (the
    length-normalized acoustic term) and ``truncated``.
    """

    units: tuple[int, ...]
    acoustic: float
    lm: float
    count: int
    total: float
    coverage: int = 0
    normalized: float = 0.0
    truncated: bool = False
