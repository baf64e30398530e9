"""Listen-attend-spell encoder-decoder with additive attention.

The encoder is a conv front end followed by BLSTM layers with time pooling
between them (three factor-2 pools give an 8x shorter sequence). The decoder
is a single LSTM layer: at step t it attends with its previous state, feeds
``[embed(y_{t-1}); c_t]`` through the LSTM, and predicts ``y_t`` from
``[s_t; c_t]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nnet
from .hypothesis import Hypothesis
from .lm import LMError, NGramLM, fingerprint_of, units_for
from .nnet import autograd as ag
from .nnet import functional as F
from .nnet import layers as L
from .nnet.autograd import Tensor
from .units import UnitVocabulary

MASK_BIAS = -1e30


class AttentionError(ValueError):
    pass


@dataclass
class LasModelConfig:
    feat_dim: int = 40
    conv_layers: int = 2
    conv_channels: int = 32
    conv_stride: tuple[int, int] = (1, 1)
    blstm_layers: int = 4
    blstm_hidden: int = 256
    num_pools: int = 3
    pool_mode: str = "concat"
    embed_dim: int = 64
    decoder_hidden: int = 256
    attention_dim: int = 128


def pooled_length(T: int, num_pools: int = 3) -> int:
    for _ in range(num_pools):
        T = -(-T // 2)
    return T


def las_encoder_specs(cfg: LasModelConfig) -> list[L.LayerSpec]:
    specs = []
    in_ch = 1
    for _ in range(cfg.conv_layers):
        specs.append(L.conv2d(in_ch, cfg.conv_channels, stride=tuple(cfg.conv_stride)))
        in_ch = cfg.conv_channels
    if specs:
        _, _, Fd = L.stack_output_shape(specs, (None, cfg.feat_dim))
        dim = cfg.conv_channels * Fd
    else:
        dim = cfg.feat_dim
    for i in range(cfg.blstm_layers):
        specs.append(L.blstm(dim, cfg.blstm_hidden))
        dim = 2 * cfg.blstm_hidden
        if i < cfg.num_pools:
            specs.append(L.time_pool(2, cfg.pool_mode))
            if cfg.pool_mode == "concat":
                dim *= 2
    return specs


def decoder_param_shapes(cfg: LasModelConfig, enc_dim: int, vocab_size: int) -> dict[str, tuple]:
    E, Hd, A = cfg.embed_dim, cfg.decoder_hidden, cfg.attention_dim
    return {
        "dec.embed": (vocab_size, E),
        "dec.lstm.W": (E + enc_dim + Hd, 4 * Hd),
        "dec.lstm.b": (4 * Hd,),
        "att.Wh": (enc_dim, A),
        "att.Ws": (Hd, A),
        "att.b": (A,),
        "att.v": (A,),
        "out.W": (Hd + enc_dim, vocab_size),
        "out.b": (vocab_size,),
    }


@dataclass
class EncoderOutput:
    h: np.ndarray

    @property
    def length(self) -> int:
        return self.h.shape[0]


@dataclass
class DecoderState:
    """Recurrent state for a batch of decodes (one row each)."""

    h: Tensor
    c: Tensor
    cum_attention: np.ndarray
    history: list[list[int]] = field(default_factory=list)


@dataclass
class AttendCache:
    """Encoder-side quantities shared by every decode step."""

    enc: Tensor
    keys: Tensor
    mask_bias: np.ndarray


@dataclass
class AttnDecodeConfig:
    beam_width: int = 8
    gamma: float = 0.0
    beta_cov: float = 0.0
    lam: float = 0.0
    tau: float = 0.5
    max_len: int = 50
    n_best: int = 1

    def __post_init__(self):
        if self.beam_width < 1:
            raise AttentionError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.gamma < 0:
            raise AttentionError("gamma must be >= 0")
        if not 0 < self.tau < 1:
            raise AttentionError("tau must lie in (0, 1)")
        if self.max_len < 1:
            raise AttentionError("max_len must be >= 1")


class LasModel:
    family = "attention"

    def __init__(self, cfg: LasModelConfig, vocab: UnitVocabulary, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.vocab = vocab
        self.specs = las_encoder_specs(cfg)
        self.params = params

    @property
    def enc_dim(self) -> int:
        return L.stack_output_shape(self.specs, (None, self.cfg.feat_dim))[-1]

    @classmethod
    def param_shapes(cls, cfg: LasModelConfig, vocab_size: int) -> dict[str, tuple]:
        specs = las_encoder_specs(cfg)
        enc_dim = L.stack_output_shape(specs, (None, cfg.feat_dim))[-1]
        return {**L.stack_param_shapes(specs, "enc."), **decoder_param_shapes(cfg, enc_dim, vocab_size)}

    @classmethod
    def build(cls, cfg: LasModelConfig, vocab: UnitVocabulary, seed: int = 0, policy: str = "gaussian", variance: float = 0.1) -> "LasModel":
        shapes = cls.param_shapes(cfg, len(vocab))
        params = L.init_from_shapes(shapes, np.random.default_rng(seed), policy, variance)
        return cls(cfg, vocab, params)

    @property
    def num_params(self) -> int:
        return sum(math.prod(v.shape) for v in self.params.values())

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    # -- encoder ----------------------------------------------------------

    def encode_batch(self, feats: np.ndarray, lengths, p: dict[str, Tensor]) -> tuple[Tensor, np.ndarray]:
        return L.apply_stack(self.specs, p, Tensor(feats), lengths, prefix="enc.")

    def attend_cache(self, enc: Tensor, enc_lengths, p: dict[str, Tensor]) -> AttendCache:
        keys = ag.matmul(enc, p["att.Wh"])
        mask = L.length_mask(enc_lengths, enc.shape[1])
        return AttendCache(enc, keys, np.where(mask > 0, 0.0, MASK_BIAS))

    # -- decoder ----------------------------------------------------------

    def initial_state(self, batch: int, U: int) -> DecoderState:
        Hd = self.cfg.decoder_hidden
        return DecoderState(Tensor(np.zeros((batch, Hd))), Tensor(np.zeros((batch, Hd))), np.zeros((batch, U)), [[] for _ in range(batch)])

    def attend(self, state: DecoderState, cache: AttendCache, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
        """Content-based additive attention. Returns context (B, D) and weights (B, U)."""
        B, U, D = cache.enc.shape
        query = ag.add(ag.matmul(state.h, p["att.Ws"]), p["att.b"])
        hidden = ag.tanh(ag.add(cache.keys, ag.reshape(query, (B, 1, -1))))
        scores = ag.add(ag.matmul(hidden, p["att.v"]), cache.mask_bias)
        weights = ag.softmax(scores, axis=-1)
        context = ag.reshape(ag.matmul(ag.reshape(weights, (B, 1, U)), cache.enc), (B, D))
        return context, weights

    def decode_step(self, state: DecoderState, context: Tensor, prev: Sequence[int], p: dict[str, Tensor]) -> tuple[Tensor, DecoderState]:
        """Output logits over the vocabulary and the next state.

        ``prev`` holds the previously emitted label of each row.
        """
        eos = self.vocab.eos
        prev = np.asarray(prev, dtype=np.int64)
        if np.any(prev == eos):
            raise AttentionError("cannot decode past <eos>")
        Hd = self.cfg.decoder_hidden
        x = ag.concat([ag.embedding(p["dec.embed"], prev), context], axis=-1)
        hc = F.lstm_cell(x, state.h, state.c, p["dec.lstm.W"], p["dec.lstm.b"])
        h, c = hc[:, :Hd], hc[:, Hd:]
        logits = ag.add(ag.matmul(ag.concat([h, context], axis=-1), p["out.W"]), p["out.b"])
        history = [hist + [int(y)] for hist, y in zip(state.history, prev)]
        return logits, DecoderState(h, c, state.cum_attention, history)

    def encode(self, feats) -> EncoderOutput:
        """Encode one utterance (T, D) in eval mode."""
        frames = np.asarray(getattr(feats, "frames", feats), dtype=np.float64)
        if frames.shape[0] == 0:
            raise AttentionError("cannot encode an empty utterance")
        with nnet.no_grad():
            out, lengths = self.encode_batch(frames[None], [frames.shape[0]], self.tensors())
        return EncoderOutput(out.data[0, : int(lengths[0])])

    # -- training ---------------------------------------------------------

    def loss(
        self,
        feats: np.ndarray,
        lengths,
        targets: Sequence[Sequence[int]],
        p: dict[str, Tensor],
        p_ss: float = 0.0,
        smoothing: float = 0.0,
        unigram: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Mean per-label cross-entropy against smoothed targets.

        Targets are unit ids without ``<sos>``/``<eos>``; the decoder input is
        ``<sos> y`` and the output ``y <eos>``. With probability ``p_ss`` each
        fed label is instead drawn from the model's previous output distribution.
        """
        if not targets:
            raise AttentionError("empty batch")
        V = len(self.vocab)
        sos, eos = self.vocab.sos, self.vocab.eos
        if smoothing > 0 and unigram is None:
            raise AttentionError("label smoothing needs a unigram distribution")
        rng = rng or np.random.default_rng(0)
        B = len(targets)
        outs = [list(t) + [eos] for t in targets]
        steps = max(len(o) for o in outs)
        gold = np.full((B, steps), eos, dtype=np.int64)
        mask = np.zeros((B, steps))
        for b, o in enumerate(outs):
            gold[b, : len(o)] = o
            mask[b, : len(o)] = 1.0

        enc, enc_lengths = self.encode_batch(feats, lengths, p)
        cache = self.attend_cache(enc, enc_lengths, p)
        state = self.initial_state(B, enc.shape[1])
        prev = np.full(B, sos, dtype=np.int64)
        terms = []
        for t in range(steps):
            context, _ = self.attend(state, cache, p)
            logits, state = self.decode_step(state, context, prev, p)
            logp = ag.log_softmax(logits, axis=-1)
            target = np.zeros((B, V))
            target[np.arange(B), gold[:, t]] = 1.0
            if smoothing > 0:
                target = (1 - smoothing) * target + smoothing * unigram[None, :]
            terms.append(ag.tsum(ag.mul(logp, -(target * mask[:, t:t + 1]))))
            fed = gold[:, t].copy()
            if p_ss > 0:
                probs = ag.softmax_np(logits.data, axis=-1)
                draw = rng.random(B) < p_ss
                for b in np.flatnonzero(draw):
                    fed[b] = rng.choice(V, p=probs[b])
            # rows past their own <eos> keep running on a harmless label
            prev = np.where(fed == eos, sos, fed)
        total = terms[0]
        for term in terms[1:]:
            total = ag.add(total, term)
        return ag.mul(total, 1.0 / mask.sum())


def unigram_distribution(targets: Sequence[Sequence[int]], vocab: UnitVocabulary) -> np.ndarray:
    """Relative frequency of each output label (units and ``<eos>``) in training targets."""
    counts = np.zeros(len(vocab))
    for t in targets:
        np.add.at(counts, np.asarray(t, dtype=np.int64), 1.0)
        counts[vocab.eos] += 1.0
    return counts / counts.sum()


def coverage(cum_attention, tau: float = 0.5) -> int:
    """Number of encoder positions whose cumulative attention exceeds ``tau``."""
    return int(np.sum(np.asarray(cum_attention) > tau))


def attention_score(logp: float, length: int, cov: int, lm: float, gamma: float, beta_cov: float, lam: float) -> tuple[float, float]:
    """Return (total, normalized acoustic term) for the decode objective."""
    normalized = logp / (max(length, 1) ** gamma)
    return normalized + beta_cov * cov + lam * lm, normalized


@dataclass
class _Beam:
    tokens: tuple[int, ...]
    logp: float
    lm: float
    lm_state: tuple
    h: np.ndarray
    c: np.ndarray
    cum: np.ndarray


def beam_search(model: LasModel, enc: EncoderOutput, config: AttnDecodeConfig, lm: NGramLM | None = None) -> list[Hypothesis]:
    """Left-to-right beam search, finishing a hypothesis when it emits ``<eos>``.

    Ranking: log P_Att(y|x) / |y|**gamma + beta_cov * cov + lam * log P_LM(y).
    ``<sos>`` is never emitted and ``<eos>`` is not allowed as the first label.
    Hypotheses that reach ``max_len`` are finalized with ``truncated=True``.
    """
    vocab = model.vocab
    V = len(vocab)
    sos, eos = vocab.sos, vocab.eos
    lm_ids = None
    if lm is not None:
        if lm.fingerprint != fingerprint_of(units_for(vocab)):
            raise LMError("LM vocabulary does not match the decoder unit vocabulary")
        lm_ids = [None if k in (sos, eos) else lm.index(vocab.units[k]) for k in range(V)]
    p = model.tensors()
    U = enc.length
    g, bcov, lam, tau = config.gamma, config.beta_cov, config.lam, config.tau

    def finish(tokens, logp, lm_score, lm_state, cum, truncated):
        lm_total = lm_score + (lm.logprob_ids(lm_state, lm.eos_id) if lm else 0.0)
        cov = coverage(cum, tau)
        total, norm = attention_score(float(logp), len(tokens), cov, float(lm_total), g, bcov, lam)
        return Hypothesis(tokens, float(logp), float(lm_total), len(tokens), total, cov, norm, truncated)

    Hd = model.cfg.decoder_hidden
    live = [_Beam((), 0.0, 0.0, lm.initial_state() if lm else (), np.zeros(Hd), np.zeros(Hd), np.zeros(U))]
    finished: list[Hypothesis] = []
    with nnet.no_grad():
        enc_t = Tensor(enc.h[None])
        base = model.attend_cache(enc_t, [U], p)
        for step in range(config.max_len):
            n = len(live)
            cache = AttendCache(
                Tensor(np.repeat(base.enc.data, n, axis=0)),
                Tensor(np.repeat(base.keys.data, n, axis=0)),
                np.repeat(base.mask_bias, n, axis=0),
            )
            state = DecoderState(
                Tensor(np.stack([b.h for b in live])),
                Tensor(np.stack([b.c for b in live])),
                np.stack([b.cum for b in live]),
                [list(b.tokens) for b in live],
            )
            prev = [b.tokens[-1] if b.tokens else sos for b in live]
            context, weights = model.attend(state, cache, p)
            logits, nstate = model.decode_step(state, context, prev, p)
            logp = ag.log_softmax_np(logits.data, axis=-1)
            cum = state.cum_attention + weights.data
            pool = []
            for i, b in enumerate(live):
                allowed = [k for k in range(V) if k != sos and not (k == eos and step == 0)]
                allowed.sort(key=lambda k: -logp[i, k])
                for k in allowed[: config.beam_width]:
                    lp = b.logp + float(logp[i, k])
                    if k == eos:
                        finished.append(finish(b.tokens, lp, b.lm, b.lm_state, cum[i], False))
                        continue
                    lm_score, lm_state = b.lm, b.lm_state
                    if lm is not None:
                        inc, lm_state = lm.step_ids(b.lm_state, lm_ids[k])
                        lm_score += inc
                    tokens = b.tokens + (k,)
                    rank, _ = attention_score(lp, len(tokens), coverage(cum[i], tau), lm_score, g, bcov, lam)
                    pool.append((rank, tokens, lp, lm_score, lm_state, i))
            pool.sort(key=lambda x: (-x[0], x[1]))
            live = [
                _Beam(tokens, lp, lm_score, lm_state, nstate.h.data[i], nstate.c.data[i], cum[i])
                for _, tokens, lp, lm_score, lm_state, i in pool[: config.beam_width]
            ]
            if not live or _done(finished, live, config, U):
                break
        else:
            for b in live:
                finished.append(finish(b.tokens, b.logp, b.lm, b.lm_state, b.cum, True))
    finished.sort(key=lambda h: (-h.total, h.units))
    return finished[: max(config.n_best, 1)]


def _upper_bound(b: _Beam, config: AttnDecodeConfig, U: int) -> float:
    """Largest total any completion of live prefix ``b`` can reach."""
    # log-probabilities only fall as a prefix grows; dividing by a longer
    # |y|**gamma can lift the acoustic term at most to 0
    acoustic = 0.0 if config.gamma > 0 else b.logp
    if config.lam < 0:
        return math.inf
    lm = config.lam * b.lm
    cov = config.beta_cov * (U if config.beta_cov > 0 else coverage(b.cum, config.tau))
    return acoustic + lm + cov


def _done(finished, live, config, U: int) -> bool:
    """True once no live prefix can displace the current top finished hypotheses."""
    k = max(config.beam_width, config.n_best)
    if len(finished) < k:
        return False
    kth = sorted((h.total for h in finished), reverse=True)[k - 1]
    return all(_upper_bound(b, config, U) < kth for b in live)


def greedy_decode(model: LasModel, enc: EncoderOutput, max_len: int = 50) -> list[int]:
    return [int(k) for k in beam_search(model, enc, AttnDecodeConfig(beam_width=1, max_len=max_len))[0].units]
