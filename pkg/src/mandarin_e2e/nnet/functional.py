"""Fused kernels with explicit backward passes.

Gate order for LSTM weights is (input, forget, output, candidate). The
combined weight matrix has shape (I + H, 4H) and multiplies ``[x_t, h_{t-1}]``.
Padding is handled with a (B, T) mask: masked steps carry the previous state
through unchanged and emit zeros, so a padded batch gives the same valid
outputs as running each sequence alone.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, make_node, sigmoid_np


def lstm_layer(x: Tensor, W: Tensor, b: Tensor, mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Run an LSTM over (B, T, I) input; returns (B, T, H)."""
    X = x.data
    B, T, I = X.shape
    H = b.shape[0] // 4
    Wd, bd = W.data, b.data
    m = np.ones((B, T)) if mask is None else np.asarray(mask, dtype=np.float64)
    steps = range(T - 1, -1, -1) if reverse else range(T)

    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, T, H))
    cache = {}
    for t in steps:
        xh = np.concatenate([X[:, t], h], axis=1)
        z = xh @ Wd + bd
        i = sigmoid_np(z[:, :H])
        f = sigmoid_np(z[:, H:2 * H])
        o = sigmoid_np(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        mt = m[:, t:t + 1]
        cache[t] = (xh, i, f, o, g, c, tc, mt)
        out[:, t] = mt * h_new
        c = mt * c_new + (1 - mt) * c
        h = mt * h_new + (1 - mt) * h

    def backward(gout):
        dW = np.zeros_like(Wd)
        db = np.zeros_like(bd)
        dX = np.zeros_like(X)
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in reversed(list(steps)):
            xh, i, f, o, g, c_prev, tc, mt = cache[t]
            dh_new = mt * (gout[:, t] + dh)
            dc_new = dh_new * o * (1 - tc * tc) + mt * dc
            dz = np.concatenate(
                [
                    dc_new * g * i * (1 - i),
                    dc_new * c_prev * f * (1 - f),
                    dh_new * tc * o * (1 - o),
                    dc_new * i * (1 - g * g),
                ],
                axis=1,
            )
            dW += xh.T @ dz
            db += dz.sum(axis=0)
            dxh = dz @ Wd.T
            dX[:, t] = dxh[:, :I]
            dh = dxh[:, I:] + (1 - mt) * dh
            dc = dc_new * f + (1 - mt) * dc
        return dX, dW, db

    return make_node(out, (x, W, b), backward)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """One LSTM step. Returns (B, 2H): new hidden state then new cell state."""
    H = b.shape[0] // 4
    I = x.shape[1]
    xh = np.concatenate([x.data, h.data], axis=1)
    z = xh @ W.data + b.data
    i = sigmoid_np(z[:, :H])
    f = sigmoid_np(z[:, H:2 * H])
    o = sigmoid_np(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c_new = f * c.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(gout):
        dh_new, dc_in = gout[:, :H], gout[:, H:]
        dc_new = dh_new * o * (1 - tc * tc) + dc_in
        dz = np.concatenate(
            [
                dc_new * g * i * (1 - i),
                dc_new * c.data * f * (1 - f),
                dh_new * tc * o * (1 - o),
                dc_new * i * (1 - g * g),
            ],
            axis=1,
        )
        dxh = dz @ W.data.T
        return dxh[:, :I], dxh[:, I:], dc_new * f, xh.T @ dz, dz.sum(axis=0)

    return make_node(np.concatenate([h_new, c_new], axis=1), (x, h, c, W, b), backward)


def conv2d(x: Tensor, W: Tensor, b: Tensor, stride=(1, 1), padding=(1, 1)) -> Tensor:
    """2-D cross-correlation. x: (B, C, T, F); W: (O, C, kh, kw); returns (B, O, T', F')."""
    X = x.data
    B, C, T, F = X.shape
    O, C2, kh, kw = W.shape
    if C2 != C:
        raise ValueError(f"conv2d expects {C2} input channels, got {C}")
    st, sf = stride
    ph, pw = padding
    Xp = np.pad(X, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(Xp, (kh, kw), axis=(2, 3))[:, :, ::st, ::sf]
    To, Fo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * To * Fo, C * kh * kw)
    Wm = W.data.reshape(O, -1)
    out = (cols @ Wm.T + b.data).reshape(B, To, Fo, O).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * To * Fo, O)
        dW = (gm.T @ cols).reshape(W.shape)
        db = gm.sum(axis=0)
        dcols = (gm @ Wm).reshape(B, To, Fo, C, kh, kw)
        dXp = np.zeros_like(Xp)
        for a in range(kh):
            for c_ in range(kw):
                dXp[:, :, a:a + st * To:st, c_:c_ + sf * Fo:sf] += dcols[:, :, :, :, a, c_].transpose(0, 3, 1, 2)
        return dXp[:, :, ph:ph + T, pw:pw + F], dW, db

    return make_node(out, (x, W, b), backward)


LN_EPS = 1e-6


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine map."""
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    D = X.shape[-1]

    def backward(g):
        red = tuple(range(X.ndim - 1))
        dgain = (g * xhat).sum(axis=red)
        dbias = g.sum(axis=red)
        gx = g * gain.data
        dx = inv / D * (D * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return make_node(xhat * gain.data + bias.data, (x, gain, bias), backward)


def normalize_np(X: np.ndarray) -> np.ndarray:
    """Layer normalization without the affine map."""
    xc = X - X.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
