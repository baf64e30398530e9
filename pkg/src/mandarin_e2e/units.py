"""Mandarin modeling units: tonal syllables, context-dependent phones, characters.

Three label inventories are supported. Characters are taken directly from
transcripts. Tonal syllables (``da4``) come from a character lexicon.
Context-dependent phones (``sil-d+a4``) are triphones over syllable initials
and toned finals.
"""
from __future__ import annotations

import enum
import hashlib
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

BLANK = "<b>"
UNK = "<unk>"
SOS = "<sos>"
EOS = "<eos>"
SIL = "sil"


class UnitParseError(ValueError):
    pass


class LexiconError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class UnitKind(str, enum.Enum):
    CDP = "CDP"
    SYLLABLE = "Syllable"
    CHARACTER = "Character"


class ModelKind(str, enum.Enum):
    CTC = "CTC"
    ATTENTION = "Attention"


@dataclass(frozen=True)
class PinyinInventory:
    initials: frozenset[str]
    finals: frozenset[str]
    tones: frozenset[int]

    @classmethod
    def from_text(cls, text: str) -> "PinyinInventory":
        sections: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                sections[current] = []
            elif current is None:
                raise UnitParseError(f"inventory entry outside a section: {line!r}")
            else:
                sections[current].extend(line.split())
        return cls(
            initials=frozenset(sections.get("initials", ())),
            finals=frozenset(sections.get("finals", ())),
            tones=frozenset(int(t) for t in sections.get("tones", ("1", "2", "3", "4", "5"))),
        )


@lru_cache(maxsize=1)
def standard_inventory() -> PinyinInventory:
    """The shipped Pinyin table (23 initials, written-form finals, tones 1-5)."""
    text = resources.files("mandarin_e2e").joinpath("data/pinyin.txt").read_text("utf-8")
    return PinyinInventory.from_text(text)


@dataclass(frozen=True, order=True)
class Syllable:
    initial: str | None
    final: str
    tone: int

    def __post_init__(self):
        if self.tone not in (1, 2, 3, 4, 5):
            raise UnitParseError(f"tone must be 1-5, got {self.tone}")

    @property
    def toned_final(self) -> str:
        return f"{self.final}{self.tone}"

    @property
    def phonemes(self) -> tuple[str, ...]:
        if self.initial is None:
            return (self.toned_final,)
        return (self.initial, self.toned_final)

    def __str__(self) -> str:
        return f"{self.initial or ''}{self.final}{self.tone}"


@dataclass(frozen=True)
class CDPhone:
    left: str
    center: str
    right: str

    def __str__(self) -> str:
        return f"{self.left}-{self.center}+{self.right}"


def parse_syllable(text: str, inventory: PinyinInventory | None = None) -> Syllable:
    """Split a toned pinyin string into initial, final and tone.

    The initial is the longest legal initial prefix; a syllable with no
    matching initial is a zero-initial syllable.

    >>> parse_syllable("zhuang3")
    Syllable(initial='zh', final='uang', tone=3)
    """
    inv = inventory or standard_inventory()
    if not text:
        raise UnitParseError("empty syllable")
    if not text[-1].isdigit():
        raise UnitParseError(f"missing tone digit in {text!r}")
    tone = int(text[-1])
    if tone not in inv.tones:
        raise UnitParseError(f"illegal tone digit {text[-1]!r} in {text!r}")
    body = text[:-1]
    if not body or not (body.isascii() and body.isalpha()):
        raise UnitParseError(f"syllable body must be ASCII letters: {body!r}")
    initial = None
    for n in (2, 1):
        if len(body) > n - 1 and body[:n] in inv.initials:
            initial = body[:n]
            break
    final = body[len(initial or ""):]
    if final not in inv.finals:
        raise UnitParseError(f"unknown final {final!r} in {text!r}")
    return Syllable(initial, final, tone)


def parse_cdp(text: str) -> CDPhone:
    left, sep, rest = text.partition("-")
    center, sep2, right = rest.rpartition("+")
    if not sep or not sep2 or not left or not center or not right:
        raise UnitParseError(f"malformed context-dependent phone {text!r}")
    return CDPhone(left, center, right)


def is_han(ch: str) -> bool:
    if len(ch) != 1:
        return False
    try:
        name = unicodedata.name(ch)
    except ValueError:
        return False
    return name.startswith("CJK UNIFIED IDEOGRAPH") or name.startswith("CJK COMPATIBILITY IDEOGRAPH")


class Lexicon(Mapping[str, tuple[Syllable, ...]]):
    """Character to ordered tonal-syllable pronunciations. Immutable."""

    def __init__(self, pairs: Iterable[tuple[str, Syllable | str]]):
        entries: dict[str, list[Syllable]] = {}
        for char, syl in pairs:
            if not is_han(char):
                raise LexiconError(f"lexicon key {char!r} is not a single Han character")
            if isinstance(syl, str):
                syl = parse_syllable(syl)
            prons = entries.setdefault(char, [])
            if syl in prons:
                raise LexiconError(f"duplicate pronunciation {syl} for {char!r}")
            prons.append(syl)
        self._entries = MappingProxyType({c: tuple(p) for c, p in entries.items()})

    @classmethod
    def from_file(cls, path: str | Path) -> "Lexicon":
        pairs = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                try:
                    char, syl = line.split("\t")
                    pairs.append((char, parse_syllable(syl.strip())))
                except (ValueError, UnitParseError) as e:
                    raise LexiconError(f"{path}:{lineno}: {e}") from None
        return cls(pairs)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for char, prons in self._entries.items():
                for syl in prons:
                    f.write(f"{char}\t{syl}\n")

    def __getitem__(self, char: str) -> tuple[Syllable, ...]:
        return self._entries[char]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def syllables(self) -> list[Syllable]:
        """Distinct syllables in first-appearance order."""
        seen: dict[Syllable, None] = {}
        for prons in self._entries.values():
            for syl in prons:
                seen.setdefault(syl, None)
        return list(seen)

    def homophones(self) -> dict[str, list[str]]:
        """Reverse map: rendered syllable -> characters in lexicon order."""
        rev: dict[str, list[str]] = {}
        for char, prons in self._entries.items():
            for syl in prons:
                rev.setdefault(str(syl), []).append(char)
        return rev


def char_to_syllables(
    sentence: str, lex: Lexicon, policy: str = "first", strict: bool = True
) -> list:
    """Map characters to pronunciations.

    ``policy="first"`` returns one Syllable per character. ``policy="lattice"``
    returns, per position, every pronunciation in lexicon order. With
    ``strict=False`` uncovered characters become ``UNK`` instead of raising.
    """
    if policy not in ("first", "lattice"):
        raise ValueError(f"unknown policy {policy!r}")
    missing = [(i, ch) for i, ch in enumerate(sentence) if ch not in lex]
    if missing and strict:
        listing = ", ".join(f"{ch!r}@{i}" for i, ch in missing)
        raise LexiconError(f"characters not in lexicon: {listing}")
    out: list = []
    for ch in sentence:
        if ch not in lex:
            out.append(UNK if policy == "first" else [UNK])
        elif policy == "first":
            out.append(lex[ch][0])
        else:
            out.append(list(lex[ch]))
    return out


def syllables_to_cdp(syllables: Sequence[Syllable]) -> list[CDPhone]:
    if not syllables:
        raise ValueError("syllables_to_cdp needs at least one syllable")
    phones = [p for syl in syllables for p in syl.phonemes]
    padded = [SIL, *phones, SIL]
    return [CDPhone(padded[i - 1], padded[i], padded[i + 1]) for i in range(1, len(padded) - 1)]


_SPECIALS = {
    ModelKind.CTC: (BLANK,),
    ModelKind.ATTENTION: (UNK, SOS, EOS),
}


@dataclass(frozen=True)
class UnitVocabulary:
    """Ordered unit inventory with special symbols appended at the end.

    CTC vocabularies end with ``<b>``; attention vocabularies end with
    ``<unk> <sos> <eos>``.
    """

    unit_kind: UnitKind
    model_kind: ModelKind
    units: tuple[str, ...]
    _index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "unit_kind", UnitKind(self.unit_kind))
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        object.__setattr__(self, "units", tuple(self.units))
        counts = Counter(self.units)
        dupes = [u for u, c in counts.items() if c > 1]
        if dupes:
            raise VocabularyError(f"duplicate units: {dupes[:5]}")
        wanted = _SPECIALS[self.model_kind]
        other = _SPECIALS[ModelKind.ATTENTION if self.model_kind == ModelKind.CTC else ModelKind.CTC]
        for sym in wanted:
            if sym not in counts:
                raise VocabularyError(f"{self.model_kind.value} vocabulary lacks {sym}")
        for sym in other:
            if sym in counts:
                raise VocabularyError(f"{self.model_kind.value} vocabulary must not contain {sym}")
        object.__setattr__(self, "_index", MappingProxyType({u: i for i, u in enumerate(self.units)}))

    @classmethod
    def from_units(cls, units: Iterable[str], unit_kind, model_kind) -> "UnitVocabulary":
        model_kind = ModelKind(model_kind)
        return cls(unit_kind, model_kind, (*units, *_SPECIALS[model_kind]))

    def __len__(self) -> int:
        return len(self.units)

    def __contains__(self, unit: str) -> bool:
        return unit in self._index

    def index(self, unit: str) -> int:
        return self._index[unit]

    def _special(self, sym: str) -> int | None:
        return self._index.get(sym)

    @property
    def blank(self) -> int | None:
        return self._special(BLANK)

    @property
    def unk(self) -> int | None:
        return self._special(UNK)

    @property
    def sos(self) -> int | None:
        return self._special(SOS)

    @property
    def eos(self) -> int | None:
        return self._special(EOS)

    @property
    def content_units(self) -> tuple[str, ...]:
        specials = set(_SPECIALS[self.model_kind])
        return tuple(u for u in self.units if u not in specials)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.unit_kind.value}|{self.model_kind.value}\n".encode())
        h.update("\n".join(self.units).encode("utf-8"))
        return h.hexdigest()[:16]

    def with_model_kind(self, model_kind) -> "UnitVocabulary":
        return UnitVocabulary.from_units(self.content_units, self.unit_kind, model_kind)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"#kind={self.unit_kind.value} model={self.model_kind.value}\n")
            for u in self.units:
                f.write(u + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "UnitVocabulary":
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        header = lines[0]
        if not header.startswith("#"):
            raise VocabularyError(f"{path}: missing '#kind=... model=...' header")
        fields = dict(tok.split("=", 1) for tok in header[1:].split())
        try:
            unit_kind, model_kind = UnitKind(fields["kind"]), ModelKind(fields["model"])
        except (KeyError, ValueError) as e:
            raise VocabularyError(f"{path}: bad header {header!r}") from e
        units = [ln for ln in lines[1:] if ln != ""]
        return cls(unit_kind, model_kind, tuple(units))


def transcript_units(text: str, unit_kind, lex: Lexicon | None = None, strict: bool = True) -> list[str]:
    """Render a character transcript as unit strings of the given kind."""
    unit_kind = UnitKind(unit_kind)
    text = "".join(text.split())
    if unit_kind == UnitKind.CHARACTER:
        return list(text)
    if lex is None:
        raise LexiconError(f"{unit_kind.value} units need a lexicon")
    syls = char_to_syllables(text, lex, "first", strict=strict)
    if unit_kind == UnitKind.SYLLABLE:
        return [str(s) for s in syls]
    if any(s == UNK for s in syls):
        raise LexiconError(f"cannot derive phones for uncovered characters in {text!r}")
    return [str(p) for p in syllables_to_cdp(syls)]


def build_vocabulary(
    corpus: Iterable[str],
    unit_kind,
    model_kind,
    lex: Lexicon | None = None,
    char_budget: int | None = None,
    min_count: int = 1,
) -> tuple[UnitVocabulary, float]:
    """Build a label inventory and report its token coverage over ``corpus``.

    Characters: the ``char_budget`` most frequent, ties by code point.
    Syllables: every syllable the lexicon can produce.
    CDP: triphones observed at least ``min_count`` times.
    """
    unit_kind, model_kind = UnitKind(unit_kind), ModelKind(model_kind)
    corpus = list(corpus)
    if not corpus:
        raise VocabularyError("empty corpus")
    if unit_kind == UnitKind.CHARACTER:
        counts = Counter(ch for line in corpus for ch in "".join(line.split()))
        ranked = sorted(counts, key=lambda c: (-counts[c], ord(c)))
        if char_budget is not None:
            ranked = ranked[:char_budget]
        units = ranked
    elif unit_kind == UnitKind.SYLLABLE:
        if lex is None:
            raise VocabularyError("syllable vocabulary needs a lexicon")
        units = sorted({str(s) for s in lex.syllables()})
        counts = Counter(u for line in corpus for u in transcript_units(line, unit_kind, lex, strict=False))
    else:
        if lex is None:
            raise VocabularyError("CDP vocabulary needs a lexicon")
        counts = Counter(u for line in corpus for u in transcript_units(line, unit_kind, lex))
        units = sorted(u for u, c in counts.items() if c >= min_count)
    total = sum(counts.values())
    if total == 0:
        raise VocabularyError("corpus contains no tokens")
    kept = set(units)
    covered = sum(c for u, c in counts.items() if u in kept)
    return UnitVocabulary.from_units(units, unit_kind, model_kind), covered / total


def encode_transcript(text: str, vocab: UnitVocabulary, lex: Lexicon | None = None) -> list[int]:
    """Label ids for a character transcript. No ``<sos>``/``<eos>`` wrapping."""
    attention = vocab.model_kind == ModelKind.ATTENTION
    units = transcript_units(text, vocab.unit_kind, lex, strict=not attention)
    ids = []
    for i, u in enumerate(units):
        if u in vocab and u not in (BLANK, SOS, EOS, UNK):
            ids.append(vocab.index(u))
        elif attention:
            ids.append(vocab.unk)
        else:
            raise VocabularyError(f"unit {u!r} at position {i} not in CTC vocabulary")
    return ids


def decode_ids(ids: Iterable[int], vocab: UnitVocabulary) -> list[str]:
    return [vocab.units[i] for i in ids]
