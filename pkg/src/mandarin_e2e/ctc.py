"""Connectionist temporal classification: loss, greedy and prefix beam decoding.

The blank label defaults to the last logit column, matching the vocabulary
layout in :mod:`mandarin_e2e.units`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nnet
from .hypothesis import Hypothesis
from .lm import LMError, NGramLM, fingerprint_of, units_for
from .nnet import autograd as ag
from .nnet import layers as L
from .nnet.autograd import Tensor, log_softmax_np
from .units import Lexicon, UnitVocabulary

NEG_INF = -np.inf


class CtcError(ValueError):
    pass


def _blank(blank: int | None, width: int) -> int:
    return width - 1 if blank is None else blank


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge repeated labels, then drop blanks."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def min_frames(target: Sequence[int]) -> int:
    """Shortest alignable input: one frame per label plus a blank between repeats."""
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _extended(target: Sequence[int], blank: int) -> tuple[np.ndarray, np.ndarray]:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    # a skip from s-2 to s is allowed for labels that differ from the label two back
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ext, skip


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, NEG_INF)
    out[k:] = a[:-k] if k else a
    return out


def ctc_forward_backward(logp: np.ndarray, target: Sequence[int], blank: int) -> tuple[float, np.ndarray]:
    """Log-likelihood and per-frame label occupancies from log posteriors (T, K)."""
    T, K = logp.shape
    target = [int(k) for k in target]
    if any(k == blank or not 0 <= k < K for k in target):
        raise CtcError(f"target labels must be non-blank ids in [0, {K}), got {target}")
    need = min_frames(target)
    if T < need:
        raise CtcError(f"target of length {len(target)} needs at least T={need} frames, got T={T}")
    ext, skip = _extended(target, blank)
    S = len(ext)
    emit = logp[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        two_back = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(prev, _shift(prev, 1)), two_back) + emit[t]
    loglik = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]

    # beta[t, s]: log mass of completing the path from state s at t, excluding frame t
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        one = np.full(S, NEG_INF)
        one[:-1] = nxt[1:]
        two = np.full(S, NEG_INF)
        two[:-2] = nxt[2:]
        beta[t] = np.logaddexp(np.logaddexp(nxt, one), np.where(skip_from, two, NEG_INF))

    gamma = np.exp(alpha + beta - loglik)
    occupancy = np.zeros((T, K))
    for s in range(S):
        occupancy[:, ext[s]] += gamma[:, s]
    return float(loglik), occupancy


def ctc_loss(logits, target: Sequence[int], blank: int | None = None) -> tuple[float, np.ndarray]:
    """Negative log probability of ``target`` under per-frame scores (T, K), and its gradient.

    Scores are unnormalized; a softmax over each row gives the frame posteriors.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise CtcError("logits must be T x K")
    if not np.all(np.isfinite(logits)):
        raise CtcError("logits contain non-finite values")
    blank = _blank(blank, logits.shape[1])
    logp = log_softmax_np(logits)
    loglik, occupancy = ctc_forward_backward(logp, target, blank)
    return -loglik, np.exp(logp) - occupancy


def ctc_loss_batch(logits: Tensor, targets: Sequence[Sequence[int]], lengths, blank: int | None = None) -> Tensor:
    """Summed CTC loss over a padded batch (B, T, K) as a graph node."""
    data = logits.data
    blank = _blank(blank, data.shape[-1])
    total = 0.0
    grad = np.zeros_like(data)
    for b, (tgt, n) in enumerate(zip(targets, lengths)):
        loss, g = ctc_loss(data[b, :n], tgt, blank)
        total += loss
        grad[b, :n] = g
    return ag.make_node(np.array(total), (logits,), lambda up: (up * grad,))


def greedy_decode(logits, blank: int | None = None) -> list[int]:
    logits = np.asarray(logits)
    blank = _blank(blank, logits.shape[1])
    return collapse(np.argmax(logits, axis=1), blank)


@dataclass
class CtcDecodeConfig:
    beam_width: int = 10
    alpha: float = 0.0
    beta: float = 0.0
    lm: NGramLM | None = None
    n_best: int = 1
    # expand only the k most probable labels per frame; None expands all
    top_k_labels: int | None = None

    def __post_init__(self):
        if self.beam_width < 1:
            raise CtcError(f"beam_width must be >= 1, got {self.beam_width}")
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise CtcError("decode weights must be finite")


def fused_score(acoustic: float, lm: float, count: int, alpha: float, beta: float) -> float:
    """log P_CTC(y|x) + alpha * log P_LM(y) + beta * |y|."""
    return acoustic + alpha * lm + beta * count


def _lm_map(lm: NGramLM, vocab: UnitVocabulary | None, K: int, blank: int) -> list[int | None]:
    if vocab is None:
        raise CtcError("LM fusion needs the unit vocabulary")
    if len(vocab) != K:
        raise CtcError(f"vocabulary size {len(vocab)} does not match logit width {K}")
    if lm.fingerprint != fingerprint_of(units_for(vocab)):
        raise LMError("LM vocabulary does not match the decoder unit vocabulary")
    return [None if k == blank else lm.index(vocab.units[k]) for k in range(K)]


@dataclass
class _Prefix:
    pb: float = NEG_INF
    pnb: float = NEG_INF
    lm: float = 0.0
    state: tuple = ()

    @property
    def ctc(self) -> float:
        return float(np.logaddexp(self.pb, self.pnb))


def prefix_beam_search(logits, config: CtcDecodeConfig, vocab: UnitVocabulary | None = None, blank: int | None = None) -> list[Hypothesis]:
    """Prefix beam search ranking by acoustic + alpha * LM + beta * unit count.

    Each prefix keeps separate blank-ending and label-ending mass. The LM is
    applied as each label is appended, so pruning sees the fused score.
    """
    logits = np.asarray(logits, dtype=np.float64)
    T, K = logits.shape
    blank = _blank(blank, K)
    logp = log_softmax_np(logits)
    lm = config.lm
    lm_ids = _lm_map(lm, vocab, K, blank) if lm is not None else None
    alpha, beta = config.alpha, config.beta
    labels = [k for k in range(K) if k != blank]

    beams: dict[tuple, _Prefix] = {(): _Prefix(pb=0.0, state=lm.initial_state() if lm else ())}
    for t in range(T):
        row = logp[t]
        cand = labels
        if config.top_k_labels is not None and config.top_k_labels < len(labels):
            order = np.argsort(-row[labels], kind="stable")[: config.top_k_labels]
            cand = [labels[i] for i in order]
        nxt: dict[tuple, _Prefix] = {}

        def entry(prefix, parent):
            e = nxt.get(prefix)
            if e is None:
                if prefix in beams:
                    src = beams[prefix]
                    e = _Prefix(lm=src.lm, state=src.state)
                else:
                    lp, state = (lm.step_ids(parent.state, lm_ids[prefix[-1]]) if lm else (0.0, ()))
                    e = _Prefix(lm=parent.lm + lp, state=state)
                nxt[prefix] = e
            return e

        for prefix, e in beams.items():
            total = e.ctc
            stay = entry(prefix, e)
            stay.pb = np.logaddexp(stay.pb, total + row[blank])
            last = prefix[-1] if prefix else None
            if last is not None:
                stay.pnb = np.logaddexp(stay.pnb, e.pnb + row[last])
            for k in cand:
                ext = entry(prefix + (k,), e)
                src = e.pb if k == last else total
                ext.pnb = np.logaddexp(ext.pnb, src + row[k])

        # prefixes reachable only through zero-mass paths carry no hypothesis
        live = [kv for kv in nxt.items() if kv[1].ctc > NEG_INF] or list(nxt.items())
        ranked = sorted(
            live, key=lambda kv: (-fused_score(kv[1].ctc, kv[1].lm, len(kv[0]), alpha, beta), kv[0])
        )
        beams = dict(ranked[: config.beam_width])

    hyps = []
    for prefix, e in beams.items():
        lm_total = float(e.lm + (lm.logprob_ids(e.state, lm.eos_id) if lm else 0.0))
        ac = e.ctc
        prefix = tuple(int(k) for k in prefix)
        hyps.append(Hypothesis(prefix, ac, lm_total, len(prefix), fused_score(ac, lm_total, len(prefix), alpha, beta)))
    hyps.sort(key=lambda h: (-h.total, h.units))
    return hyps[: max(config.n_best, 1)]


def syllable_to_char_transduce(lattice, lex: Lexicon, char_lm: NGramLM, beam_width: int = 10) -> str:
    """Pick characters for a syllable sequence by beam search under a character LM.

    ``lattice`` holds, per position, a syllable string or a list of candidate
    syllables. Candidates are the homophones of those syllables in lexicon
    order; equal scores resolve to the earlier candidate.
    """
    if beam_width < 1:
        raise CtcError("beam_width must be >= 1")
    rev = lex.homophones()
    positions = []
    for item in lattice:
        syls = [item] if isinstance(item, str) else [str(s) for s in item]
        chars: list[str] = []
        for s in syls:
            s = str(s)
            if s not in rev:
                raise CtcError(f"syllable {s!r} has no homophone character in the lexicon")
            chars.extend(c for c in rev[s] if c not in chars)
        positions.append(chars)

    beams = [(0.0, (), char_lm.initial_state(), "")]
    for chars in positions:
        grown = []
        for score, idx, state, text in beams:
            for j, ch in enumerate(chars):
                lp, st = char_lm.step_ids(state, char_lm.index(ch))
                grown.append((score + lp, idx + (j,), st, text + ch))
        grown.sort(key=lambda b: (-b[0], b[1]))
        beams = grown[:beam_width]
    finals = [(s + char_lm.logprob_ids(st, char_lm.eos_id), idx, text) for s, idx, st, text in beams]
    finals.sort(key=lambda b: (-b[0], b[1]))
    return finals[0][2]


@dataclass
class CtcModelConfig:
    feat_dim: int = 40
    conv_channels: int = 32
    conv_stride: tuple[int, int] = (1, 1)
    num_res_blocks: int = 2
    lstm_layers: int = 4
    lstm_hidden: int = 1024
    layer_norm: bool = True


def ctc_encoder_specs(cfg: CtcModelConfig, num_labels: int) -> list[L.LayerSpec]:
    """Conv2d, residual blocks, unidirectional LSTMs each followed by layer norm, output projection."""
    specs = [L.conv2d(1, cfg.conv_channels, stride=tuple(cfg.conv_stride))]
    specs += [L.residual_block(cfg.conv_channels) for _ in range(cfg.num_res_blocks)]
    _, _, Fd = L.stack_output_shape(specs, (None, cfg.feat_dim))
    dim = cfg.conv_channels * Fd
    for _ in range(cfg.lstm_layers):
        specs.append(L.lstm(dim, cfg.lstm_hidden))
        dim = cfg.lstm_hidden
        if cfg.layer_norm:
            specs.append(L.layer_norm(dim))
    specs.append(L.linear(dim, num_labels))
    return specs


class CtcModel:
    family = "ctc"

    def __init__(self, specs: Sequence[L.LayerSpec], params: dict[str, np.ndarray]):
        self.specs = list(specs)
        self.params = params

    @classmethod
    def build(cls, cfg: CtcModelConfig, num_labels: int, seed: int = 0, policy: str = "uniform-fanin", variance: float = 0.1) -> "CtcModel":
        specs = ctc_encoder_specs(cfg, num_labels)
        return cls(specs, L.init_weights(specs, seed, policy, variance))

    @property
    def num_params(self) -> int:
        return nnet.count_params(self.specs)

    def logits(self, feats: np.ndarray) -> np.ndarray:
        """Per-frame label scores for one utterance (T, D) in eval mode."""
        res = L.forward(self.specs, self.params, feats[None], "eval")
        return res.output.data[0, : int(res.lengths[0])]

    def batch_logits(self, batch: np.ndarray, lengths, params: dict[str, Tensor]):
        return L.apply_stack(self.specs, params, Tensor(batch), lengths)

    def loss(self, batch: np.ndarray, lengths, targets, params: dict[str, Tensor]) -> Tensor:
        """Mean per-utterance CTC loss for a padded batch."""
        out, out_lengths = self.batch_logits(batch, lengths, params)
        total = ctc_loss_batch(out, targets, out_lengths)
        return ag.mul(total, 1.0 / len(targets))
