"""Back-off n-gram language model over modeling units.

Training uses interpolated Kneser-Ney with a fixed discount. The highest
order, and any n-gram starting with ``<s>``, use raw counts; lower orders use
continuation counts. The recursion bottoms out in a uniform distribution over
the predictable symbols (units plus ``</s>``), so every probability is
positive and each conditional distribution sums to one.

Interpolated KN is exactly representable in back-off form: seen n-grams store
their interpolated probability, contexts store the left-over mass as a
back-off weight. Scoring, the ARPA export and the binary dump all use that
form.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .units import UNK, ModelKind, UnitVocabulary

BOS = "<s>"
EOS = "</s>"
DISCOUNT = 0.75
LOG10 = math.log(10.0)
BIN_MAGIC = b"NGLM"
BIN_VERSION = 1


class LMError(ValueError):
    pass


def units_for(vocab: UnitVocabulary) -> tuple[str, ...]:
    """LM token inventory matching a decoder vocabulary."""
    units = vocab.content_units
    if vocab.model_kind == ModelKind.ATTENTION:
        units = (*units, UNK)
    return units


def fingerprint_of(units: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(units).encode("utf-8")).hexdigest()[:16]


class NGramLM:
    """Immutable back-off model. Token ids: units 0..V-1, ``</s>`` = V, ``<s>`` = V+1."""

    def __init__(self, order: int, units: Sequence[str], logprob: list[dict], logbow: list[dict], discount: float = DISCOUNT):
        self.order = order
        self.units = tuple(units)
        self.discount = discount
        self._index = {u: i for i, u in enumerate(self.units)}
        self.eos_id = len(self.units)
        self.bos_id = len(self.units) + 1
        # logprob[n][ngram tuple] and logbow[n][context tuple], n = length
        self._logprob = logprob
        self._logbow = logbow
        self._uniform = -math.log(len(self.units) + 1)

    @property
    def fingerprint(self) -> str:
        return fingerprint_of(self.units)

    @property
    def num_predicted(self) -> int:
        return len(self.units) + 1

    def token(self, i: int) -> str:
        if i == self.eos_id:
            return EOS
        if i == self.bos_id:
            return BOS
        return self.units[i]

    def index(self, unit: str) -> int:
        if unit == EOS:
            return self.eos_id
        try:
            return self._index[unit]
        except KeyError:
            raise LMError(f"unit {unit!r} not in LM vocabulary") from None

    @classmethod
    def uniform(cls, units: Sequence[str]) -> "NGramLM":
        return cls(1, units, [{}, {}], [{}, {}])

    # -- scoring -----------------------------------------------------------

    def logprob_ids(self, context: tuple[int, ...], w: int) -> float:
        """Natural-log P(w | context), backing off through shorter contexts."""
        acc = 0.0
        h = context[-(self.order - 1):] if self.order > 1 else ()
        while True:
            n = len(h) + 1
            p = self._logprob[n].get(h + (w,))
            if p is not None:
                return acc + p
            if not h:
                return acc + self._uniform
            acc += self._logbow[len(h)].get(h, 0.0)
            h = h[1:]

    def initial_state(self) -> tuple[int, ...]:
        return (self.bos_id,) if self.order > 1 else ()

    def step_ids(self, state: tuple[int, ...], w: int) -> tuple[float, tuple[int, ...]]:
        lp = self.logprob_ids(state, w)
        if self.order == 1:
            return lp, ()
        return lp, (state + (w,))[-(self.order - 1):]

    def distribution(self, context: Sequence[str]) -> dict[str, float]:
        """P(w | context) for every predictable token."""
        ctx = self.initial_state() + tuple(self.index(u) for u in context)
        return {self.token(w): math.exp(self.logprob_ids(ctx, w)) for w in range(self.num_predicted)}

    # -- serialization -----------------------------------------------------

    def to_arpa(self) -> str:
        lines = ["\\data\\"]
        entries = []
        for n in range(1, self.order + 1):
            grams = dict(self._logprob[n])
            if n == 1:
                for w in range(self.num_predicted):
                    grams.setdefault((w,), self._uniform)
                grams[(self.bos_id,)] = None
            entries.append(grams)
            lines.append(f"ngram {n}={len(grams)}")
        for n, grams in enumerate(entries, 1):
            lines.append("")
            lines.append(f"\\{n}-grams:")
            for g in sorted(grams):
                lp = grams[g]
                lp10 = -99.0 if lp is None else lp / LOG10
                words = " ".join(self.token(i) for i in g)
                row = f"{lp10:.6f}\t{words}"
                if n < self.order and g in self._logbow[n]:
                    row += f"\t{self._logbow[n][g] / LOG10:.6f}"
                lines.append(row)
        lines.append("")
        lines.append("\\end\\")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        head = json.dumps({"order": self.order, "units": list(self.units), "discount": self.discount}, ensure_ascii=False).encode("utf-8")
        with open(path, "wb") as f:
            f.write(BIN_MAGIC)
            f.write(struct.pack("<III", BIN_VERSION, self.order, len(head)))
            f.write(head)
            for tables in (self._logprob, self._logbow):
                for n in range(1, self.order + 1):
                    keys = sorted(tables[n])
                    ids = np.asarray(keys, dtype="<u4").reshape(len(keys), n)
                    vals = np.asarray([tables[n][k] for k in keys], dtype="<f8")
                    f.write(struct.pack("<I", len(keys)))
                    f.write(ids.tobytes())
                    f.write(vals.tobytes())

    @classmethod
    def load(cls, path) -> "NGramLM":
        data = Path(path).read_bytes()
        if data[:4] != BIN_MAGIC:
            raise LMError(f"{path}: not a binary LM (magic {data[:4]!r})")
        version, order, hlen = struct.unpack_from("<III", data, 4)
        if version != BIN_VERSION:
            raise LMError(f"{path}: unsupported LM version {version}")
        head = json.loads(data[16:16 + hlen].decode("utf-8"))
        off = 16 + hlen
        tables = []
        for _ in range(2):
            t: list[dict] = [{}]
            for n in range(1, order + 1):
                (count,) = struct.unpack_from("<I", data, off)
                off += 4
                ids = np.frombuffer(data, dtype="<u4", count=count * n, offset=off).reshape(count, n)
                off += 4 * count * n
                vals = np.frombuffer(data, dtype="<f8", count=count, offset=off)
                off += 8 * count
                t.append({tuple(int(i) for i in row): float(v) for row, v in zip(ids, vals)})
            tables.append(t)
        return cls(order, head["units"], tables[0], tables[1], head["discount"])


def train_lm(transcripts: Iterable[Sequence[str]], order: int = 4, units: Sequence[str] | None = None, discount: float = DISCOUNT) -> NGramLM:
    """Interpolated Kneser-Ney over unit sequences, each padded with ``<s>``/``</s>``."""
    if order < 1:
        raise LMError(f"order must be >= 1, got {order}")
    if not 0 < discount < 1:
        raise LMError(f"discount must be in (0, 1), got {discount}")
    sentences = [list(s) for s in transcripts]
    if not sentences:
        raise LMError("empty corpus")
    if units is None:
        units = sorted({u for s in sentences for u in s})
    lm_shell = NGramLM.uniform(units)
    bos, eos = lm_shell.bos_id, lm_shell.eos_id

    raw: list[Counter] = [Counter() for _ in range(order + 1)]
    for s in sentences:
        seq = [bos] + [lm_shell.index(u) for u in s] + [eos]
        for i in range(1, len(seq)):
            for n in range(1, order + 1):
                if i - n + 1 < 0:
                    break
                raw[n][tuple(seq[i - n + 1:i + 1])] += 1

    # adjusted counts: raw at the top order and for <s>-initial n-grams,
    # distinct-left-extension counts otherwise
    adj: list[dict] = [dict() for _ in range(order + 1)]
    for n in range(1, order + 1):
        if n == order:
            adj[n] = dict(raw[n])
            continue
        cont = Counter()
        for g in raw[n + 1]:
            cont[g[1:]] += 1
        for g, c in raw[n].items():
            adj[n][g] = c if g[0] == bos else cont[g]

    logprob: list[dict] = [{} for _ in range(order + 1)]
    logbow: list[dict] = [{} for _ in range(order + 1)]
    V = lm_shell.num_predicted
    for n in range(1, order + 1):
        totals: dict[tuple, float] = defaultdict(float)
        types: Counter = Counter()
        for g, a in adj[n].items():
            if a > 0:
                totals[g[:-1]] += a
                types[g[:-1]] += 1
        gamma = {h: discount * types[h] / totals[h] for h in totals}
        for g, a in adj[n].items():
            if a <= 0:
                continue
            h, w = g[:-1], g[-1]
            lower = -math.log(V) if n == 1 else _lookup(logprob, logbow, h[1:], w, V)
            p = (a - discount) / totals[h] + gamma[h] * math.exp(lower)
            logprob[n][g] = math.log(p)
        for h, gm in gamma.items():
            if n == 1:
                uni_bow = gm
            else:
                logbow[n - 1][h] = math.log(gm)
        if n == 1:
            # unseen unigrams get gamma(empty) * uniform
            for w in range(V):
                logprob[1].setdefault((w,), math.log(uni_bow / V))
    return NGramLM(order, units, logprob, logbow, discount)


def _lookup(logprob, logbow, h: tuple, w: int, V: int) -> float:
    acc = 0.0
    while True:
        p = logprob[len(h) + 1].get(h + (w,))
        if p is not None:
            return acc + p
        if not h:
            return acc - math.log(V)
        acc += logbow[len(h)].get(h, 0.0)
        h = h[1:]


def score(lm: NGramLM, sequence: Sequence[str], fingerprint: str | None = None) -> float:
    """Natural-log probability of a full sentence, including ``</s>``."""
    if fingerprint is not None and fingerprint != lm.fingerprint:
        raise LMError(f"vocabulary fingerprint {fingerprint} does not match LM {lm.fingerprint}")
    state = lm.initial_state()
    total = 0.0
    for u in sequence:
        lp, state = lm.step_ids(state, lm.index(u))
        total += lp
    return total + lm.logprob_ids(state, lm.eos_id)


def score_step(lm: NGramLM, state: tuple[int, ...], unit: str) -> tuple[float, tuple[int, ...]]:
    return lm.step_ids(state, lm.index(unit))


def perplexity(lm: NGramLM, corpus: Iterable[Sequence[str]]) -> float:
    total, count = 0.0, 0
    for s in corpus:
        total += score(lm, s)
        count += len(s) + 1
    if count == 0:
        raise LMError("empty corpus")
    return math.exp(-total / count)
