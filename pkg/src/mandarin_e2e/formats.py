"""Manifest, hypothesis and posterior-matrix files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .hypothesis import Hypothesis

POST_MAGIC = b"POST"


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    utt_id: str
    path: str
    transcript: str


class Manifest(list):
    """TSV rows of ``utt_id<TAB>path<TAB>transcript``; relative paths resolve against the file."""

    @classmethod
    def read(cls, path, check_files: bool = True) -> "Manifest":
        base = Path(path).parent
        out = cls()
        seen = set()
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
                utt, p, text = parts
                if utt in seen:
                    raise FormatError(f"{path}:{lineno}: duplicate utterance id {utt!r}")
                seen.add(utt)
                out.append(ManifestRecord(utt, p, text))
        out.base = base
        if check_files:
            out.validate()
        return out

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else getattr(self, "base", Path(".")) / p

    def validate(self) -> None:
        ids = [r.utt_id for r in self]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate utterance ids in manifest")
        missing = [r.path for r in self if not self.resolve(r).exists()]
        if missing:
            raise FormatError(f"manifest references missing files: {missing[:5]}")

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for r in self:
                f.write(f"{r.utt_id}\t{r.path}\t{r.transcript}\n")


def format_hypothesis(utt_id: str, units: Sequence[str], hyp: Hypothesis, attention: bool = False) -> str:
    cols = [utt_id, " ".join(units), f"{hyp.acoustic:.6f}", f"{hyp.lm:.6f}", str(hyp.count)]
    if attention:
        cols += [str(hyp.coverage), f"{hyp.normalized:.6f}"]
    return "\t".join(cols)


def read_hypotheses(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise FormatError(f"{path}:{lineno}: malformed hypothesis line")
            if cols[0] in out:
                raise FormatError(f"{path}:{lineno}: duplicate utterance id {cols[0]!r}")
            out[cols[0]] = cols[1].split()
    return out


def write_posteriors(path, logp) -> None:
    arr = np.ascontiguousarray(logp, dtype="<f4")
    with open(path, "wb") as f:
        f.write(POST_MAGIC)
        f.write(struct.pack("<II", *arr.shape))
        f.write(arr.tobytes())


def read_posteriors(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != POST_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    T, V = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * T * V:
        raise FormatError(f"{path}: size does not match {T}x{V}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(T, V).astype(np.float64)
