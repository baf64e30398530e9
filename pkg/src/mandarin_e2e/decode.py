"""Decode a manifest with a trained checkpoint of either family."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention as att
from . import ctc
from .config import DecodeConfig
from .features import CMVNStats, FeatureMatrix, apply_cmvn, write_features
from .formats import Manifest, format_hypothesis
from .hypothesis import Hypothesis
from .lm import NGramLM
from .nnet import no_grad
from .nnet.autograd import Tensor
from .train import load_feature_matrix
from .units import Lexicon, UnitKind


@dataclass
class Decoder:
    """A read-only model plus everything needed to turn features into units."""

    model: object
    config: DecodeConfig
    lm: NGramLM | None = None
    lexicon: Lexicon | None = None
    char_lm: NGramLM | None = None

    def __post_init__(self):
        if self.config.transduce_lexicon and self.lexicon is None:
            self.lexicon = Lexicon.from_file(self.config.transduce_lexicon)
        if self.config.char_lm and self.char_lm is None:
            self.char_lm = NGramLM.load(self.config.char_lm)
        if self.config.lm and self.lm is None:
            self.lm = NGramLM.load(self.config.lm)
        if (self.lexicon is None) != (self.char_lm is None):
            raise ValueError("syllable-to-character transduction needs both a lexicon and a character LM")
        if self.lexicon is not None and self.model.vocab.unit_kind != UnitKind.SYLLABLE:
            raise ValueError("transduction applies to syllable models only")

    @property
    def attention(self) -> bool:
        return self.model.family == "attention"

    def hypotheses(self, feats: np.ndarray) -> list[Hypothesis]:
        c = self.config
        if self.model.family == "ctc":
            logits = self.model.logits(feats)
            if c.greedy:
                ids = ctc.greedy_decode(logits)
                nll, _ = ctc.ctc_loss(logits, ids)
                return [Hypothesis(tuple(ids), -nll, 0.0, len(ids), -nll)]
            dc = ctc.CtcDecodeConfig(c.beam_width, c.alpha, c.beta_wc, self.lm, c.n_best, c.top_k_labels)
            return ctc.prefix_beam_search(logits, dc, self.model.vocab)
        enc = self.model.encode(feats)
        beam = 1 if c.greedy else c.beam_width
        dc = att.AttnDecodeConfig(beam, c.gamma, c.beta_cov, c.lam, c.tau, c.max_len, c.n_best)
        return att.beam_search(self.model, enc, dc, self.lm)

    def units(self, hyp: Hypothesis) -> list[str]:
        units = [self.model.vocab.units[k] for k in hyp.units]
        if self.lexicon is not None:
            return list(ctc.syllable_to_char_transduce(units, self.lexicon, self.char_lm, self.config.transduce_beam))
        return units


def attention_matrix(model, feats: np.ndarray, ids) -> np.ndarray:
    """Teacher-forced attention weights, one row per output step (units then ``<eos>``)."""
    enc = model.encode(feats)
    p = model.tensors()
    with no_grad():
        cache = model.attend_cache(Tensor(enc.h[None]), [enc.length], p)
        state = model.initial_state(1, enc.length)
        prev = model.vocab.sos
        rows = []
        for y in list(ids) + [model.vocab.eos]:
            context, weights = model.attend(state, cache, p)
            rows.append(weights.data[0])
            _, state = model.decode_step(state, context, [prev], p)
            prev = y
    return np.stack(rows)


def decode_manifest(
    decoder: Decoder,
    manifest_path,
    out_path,
    cmvn: CMVNStats | None = None,
    threads: int = 1,
    attention_dump: str | None = None,
) -> int:
    """Write one hypothesis line per manifest record, in manifest order. Returns the line count."""
    manifest = Manifest.read(manifest_path)
    dump_dir = Path(attention_dump) if attention_dump else None
    if dump_dir is not None:
        if not decoder.attention:
            raise ValueError("attention dumps need an attention model")
        dump_dir.mkdir(parents=True, exist_ok=True)

    def run(rec):
        x = load_feature_matrix(manifest.resolve(rec))
        if cmvn is not None:
            x = apply_cmvn(FeatureMatrix(x), cmvn).frames
        best = decoder.hypotheses(x)[0]
        if dump_dir is not None:
            write_features(dump_dir / f"{rec.utt_id}.fbk", attention_matrix(decoder.model, x, best.units))
        return format_hypothesis(rec.utt_id, decoder.units(best), best, decoder.attention)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            lines = list(pool.map(run, manifest))
    else:
        lines = [run(r) for r in manifest]
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")
    return len(lines)
