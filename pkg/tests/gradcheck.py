"""Finite-difference gradient checks for layer stacks and the two training losses."""
from __future__ import annotations

import numpy as np

from mandarin_e2e import nnet
from mandarin_e2e.attention import LasModel, LasModelConfig, unigram_distribution
from mandarin_e2e.ctc import CtcModel, CtcModelConfig
from mandarin_e2e.nnet import layers as L
from mandarin_e2e.nnet.autograd import Tensor
from mandarin_e2e.units import UnitVocabulary

from .oracles import numeric_grad, rel_error

LAYER_KINDS = ("conv2d", "residual_block", "lstm", "blstm", "layer_norm", "linear", "time_pool")
TOLERANCE = 1e-4


def random_layer(kind: str, rng: np.random.Generator):
    """A small random instance of ``kind``: (specs, params, input, lengths)."""
    B = 2
    T = int(rng.integers(2, 6))
    lengths = np.array([T, int(rng.integers(1, T + 1))])
    if kind == "conv2d":
        F = int(rng.integers(2, 5))
        C = int(rng.integers(1, 3))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        spec = L.conv2d(C, int(rng.integers(1, 3)), stride=stride)
        x = rng.normal(size=(B, C, T, F)) if C > 1 else rng.normal(size=(B, T, F))
    elif kind == "residual_block":
        C, F = int(rng.integers(1, 3)), int(rng.integers(2, 4))
        spec = L.residual_block(C)
        x = rng.normal(size=(B, C, T, F))
    elif kind in ("lstm", "blstm"):
        I, H = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        spec = L.lstm(I, H) if kind == "lstm" else L.blstm(I, H)
        x = rng.normal(size=(B, T, I))
    elif kind == "layer_norm":
        D = int(rng.integers(2, 6))
        spec = L.layer_norm(D)
        x = rng.normal(scale=2.0, size=(B, T, D))
    elif kind == "linear":
        I, O = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        spec = L.linear(I, O, bias=bool(rng.integers(0, 2)))
        x = rng.normal(size=(B, T, I))
    elif kind == "time_pool":
        D = int(rng.integers(1, 4))
        spec = L.time_pool(int(rng.integers(2, 4)), str(rng.choice(["concat", "subsample"])))
        x = rng.normal(size=(B, T, D))
    else:
        raise ValueError(kind)
    specs = [spec]
    params = L.init_weights(specs, int(rng.integers(2**31)), "gaussian", 0.5)
    # keep layer-norm affine terms away from their trivial init
    for k in params:
        if k.endswith(("gain", "bias")):
            params[k] = rng.normal(size=params[k].shape)
    return specs, params, x, lengths


def check_stack(specs, params, x, lengths, rng: np.random.Generator, h: float = 1e-4) -> float:
    """Max relative error of parameter and input gradients of sum(output * upstream)."""
    res = nnet.forward(specs, params, x, "train", lengths)
    up = rng.normal(size=res.output.shape)
    grads, gin = nnet.backward(res, up)

    def f():
        return float(np.sum(nnet.forward(specs, params, x, "eval", lengths).output.data * up))

    err = rel_error(gin, numeric_grad(f, x, h))
    for name, p in params.items():
        err = max(err, rel_error(grads[name], numeric_grad(f, p, h)))
    return err


def layer_error(kind: str, seed: int) -> float:
    rng = np.random.default_rng([seed, LAYER_KINDS.index(kind)])
    specs, params, x, lengths = random_layer(kind, rng)
    return check_stack(specs, params, x, lengths, rng)


def _loss_error(loss_fn, params: dict[str, np.ndarray], h: float = 1e-4) -> float:
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss_fn(tensors).backward()

    def f():
        with nnet.no_grad():
            return float(loss_fn({k: Tensor(v) for k, v in params.items()}).data)

    return max(rel_error(tensors[k].grad, numeric_grad(f, v, h)) for k, v in params.items())


def ctc_loss_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    vocab = UnitVocabulary.from_units(list("abc"), "Character", "CTC")
    cfg = CtcModelConfig(feat_dim=3, conv_channels=1, num_res_blocks=1, lstm_layers=1, lstm_hidden=2)
    model = CtcModel.build(cfg, len(vocab), seed=seed, policy="gaussian", variance=0.3)
    feats = rng.normal(size=(2, 4, 3))
    targets = [[0, 1], [2]]
    return _loss_error(lambda p: model.loss(feats, [4, 3], targets, p), model.params)


def attention_loss_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    vocab = UnitVocabulary.from_units(list("abc"), "Character", "Attention")
    cfg = LasModelConfig(feat_dim=3, conv_layers=1, conv_channels=1, blstm_layers=1, blstm_hidden=2,
                         num_pools=1, embed_dim=2, decoder_hidden=3, attention_dim=2)
    model = LasModel.build(cfg, vocab, seed=seed, variance=0.3)
    feats = rng.normal(size=(2, 5, 3))
    targets = [[0, 1], [2]]
    uni = unigram_distribution(targets, vocab)
    return _loss_error(lambda p: model.loss(feats, [5, 3], targets, p, smoothing=0.1, unigram=uni), model.params)
