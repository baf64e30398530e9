"""Layer specifications and the layer-stack forward/backward driver.

Activations flow in one of two layouts: sequences ``(B, T, D)`` and
feature maps ``(B, C, T, F)``. Convolutions produce maps; sequence layers
flatten a map input to ``(B, T, C*F)``. Every layer re-applies the padding
mask to its output so padded batches match per-utterance evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from . import autograd as ag
from . import functional as F
from .autograd import Tensor

KINDS = ("conv2d", "residual_block", "lstm", "blstm", "layer_norm", "linear", "time_pool")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hp: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "hp", dict(self.hp))

    def __getitem__(self, key):
        return self.hp[key]

    def to_dict(self) -> dict:
        return {"kind": self.kind, **{k: list(v) if isinstance(v, tuple) else v for k, v in self.hp.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def conv2d(in_channels, out_channels, kernel=(3, 3), stride=(1, 1), activation="relu") -> LayerSpec:
    return LayerSpec("conv2d", dict(in_channels=in_channels, out_channels=out_channels,
                                    kernel=tuple(kernel), stride=tuple(stride), activation=activation))


def residual_block(channels, kernel=(3, 3)) -> LayerSpec:
    return LayerSpec("residual_block", dict(channels=channels, kernel=tuple(kernel)))


def lstm(input_size, hidden_size) -> LayerSpec:
    return LayerSpec("lstm", dict(input_size=input_size, hidden_size=hidden_size))


def blstm(input_size, hidden_size) -> LayerSpec:
    return LayerSpec("blstm", dict(input_size=input_size, hidden_size=hidden_size))


def layer_norm(dim) -> LayerSpec:
    return LayerSpec("layer_norm", dict(dim=dim))


def linear(in_dim, out_dim, bias=True) -> LayerSpec:
    return LayerSpec("linear", dict(in_dim=in_dim, out_dim=out_dim, bias=bias))


def time_pool(factor=2, mode="concat") -> LayerSpec:
    if mode not in ("concat", "subsample"):
        raise ValueError(f"unknown time_pool mode {mode!r}")
    return LayerSpec("time_pool", dict(factor=factor, mode=mode))


def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    k, hp = spec.kind, spec.hp
    if k == "conv2d":
        kh, kw = hp["kernel"]
        return {"W": (hp["out_channels"], hp["in_channels"], kh, kw), "b": (hp["out_channels"],)}
    if k == "residual_block":
        kh, kw = hp["kernel"]
        C = hp["channels"]
        return {"conv1.W": (C, C, kh, kw), "conv1.b": (C,), "conv2.W": (C, C, kh, kw), "conv2.b": (C,)}
    if k == "lstm":
        I, H = hp["input_size"], hp["hidden_size"]
        return {"W": (I + H, 4 * H), "b": (4 * H,)}
    if k == "blstm":
        I, H = hp["input_size"], hp["hidden_size"]
        return {"fw.W": (I + H, 4 * H), "fw.b": (4 * H,), "bw.W": (I + H, 4 * H), "bw.b": (4 * H,)}
    if k == "layer_norm":
        return {"gain": (hp["dim"],), "bias": (hp["dim"],)}
    if k == "linear":
        shapes = {"W": (hp["in_dim"], hp["out_dim"])}
        if hp.get("bias", True):
            shapes["b"] = (hp["out_dim"],)
        return shapes
    return {}


def stack_param_shapes(specs, prefix: str = "") -> dict[str, tuple[int, ...]]:
    return {f"{prefix}{i}.{name}": shape for i, s in enumerate(specs) for name, shape in param_shapes(s).items()}


def count_params(specs) -> int:
    return sum(math.prod(shape) for shape in stack_param_shapes(specs).values())


def _conv_len(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Per-example output shape; ``in_shape`` is (T, D) or (C, T, F). T may be None."""
    k, hp = spec.kind, spec.hp
    if k == "conv2d":
        if len(in_shape) == 2:
            in_shape = (1, *in_shape)
        C, T, Fd = in_shape
        if C != hp["in_channels"]:
            raise ShapeError(f"conv2d expects {hp['in_channels']} channels, got {C}")
        (kh, kw), (st, sf) = hp["kernel"], hp["stride"]
        To = None if T is None else _conv_len(T, kh, st, kh // 2)
        return (hp["out_channels"], To, _conv_len(Fd, kw, sf, kw // 2))
    if k == "residual_block":
        if len(in_shape) != 3 or in_shape[0] != hp["channels"]:
            raise ShapeError(f"residual_block expects ({hp['channels']}, T, F), got {in_shape}")
        return in_shape
    T, D = _as_seq_shape(in_shape)
    if k in ("lstm", "blstm"):
        if D != hp["input_size"]:
            raise ShapeError(f"{k} expects input size {hp['input_size']}, got {D}")
        return (T, hp["hidden_size"] * (2 if k == "blstm" else 1))
    if k == "layer_norm":
        if D != hp["dim"]:
            raise ShapeError(f"layer_norm expects dim {hp['dim']}, got {D}")
        return (T, D)
    if k == "linear":
        if D != hp["in_dim"]:
            raise ShapeError(f"linear expects in_dim {hp['in_dim']}, got {D}")
        return (T, hp["out_dim"])
    f = hp["factor"]
    To = None if T is None else -(-T // f)
    return (To, D * f if hp["mode"] == "concat" else D)


def _as_seq_shape(shape):
    if len(shape) == 3:
        C, T, Fd = shape
        return T, C * Fd
    return shape


def stack_output_shape(specs, in_shape):
    shape = tuple(in_shape)
    for i, s in enumerate(specs):
        try:
            shape = output_shape(s, shape)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({s.kind}): {e}") from None
    return shape


def init_weights(specs, seed: int, policy: str = "uniform-fanin", variance: float = 0.1, prefix: str = "") -> dict[str, np.ndarray]:
    """Initialize parameters reproducibly.

    ``gaussian`` draws every weight and bias from N(0, variance).
    ``uniform-fanin`` draws weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    with zero biases. Layer-norm gains start at 1 and offsets at 0 under both.
    """
    rng = np.random.default_rng(seed)
    return init_from_shapes(stack_param_shapes(specs, prefix), rng, policy, variance)


def init_from_shapes(shapes: Mapping[str, tuple], rng: np.random.Generator, policy: str, variance: float) -> dict[str, np.ndarray]:
    if policy not in ("gaussian", "uniform-fanin"):
        raise ValueError(f"unknown init policy {policy!r}")
    params = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            params[name] = np.ones(shape)
        elif leaf == "bias":
            params[name] = np.zeros(shape)
        elif policy == "gaussian":
            params[name] = rng.normal(0.0, math.sqrt(variance), size=shape) if variance > 0 else np.zeros(shape)
        elif leaf == "b":
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else math.prod(shape[1:])
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def time_pool_np(seq: np.ndarray, factor: int = 2, mode: str = "concat") -> np.ndarray:
    """Pool a (T, D) sequence by ``factor``: ceil(T/factor) rows."""
    T, D = seq.shape
    if T < 1:
        raise ValueError("time_pool needs T >= 1")
    if mode == "subsample":
        return seq[::factor]
    pad = (-T) % factor
    padded = np.concatenate([seq, np.zeros((pad, D))]) if pad else seq
    return padded.reshape(-1, factor * D)


def length_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def _to_seq(x: Tensor) -> Tensor:
    if x.ndim == 4:
        B, C, T, Fd = x.shape
        return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (B, T, C * Fd))
    return x


def _mask_seq(x: Tensor, lengths) -> Tensor:
    return ag.mul(x, length_mask(lengths, x.shape[1])[:, :, None])


def _mask_map(x: Tensor, lengths) -> Tensor:
    return ag.mul(x, length_mask(lengths, x.shape[2])[:, None, :, None])


def apply_layer(spec: LayerSpec, p: Mapping[str, Tensor], x: Tensor, lengths: np.ndarray):
    """Apply one layer to a batch. Returns (output, new lengths)."""
    k, hp = spec.kind, spec.hp
    if k == "conv2d":
        if x.ndim == 3:
            x = ag.reshape(x, (x.shape[0], 1, *x.shape[1:]))
        (kh, kw), (st, sf) = hp["kernel"], hp["stride"]
        y = F.conv2d(x, p["W"], p["b"], (st, sf), (kh // 2, kw // 2))
        if hp.get("activation", "relu") == "relu":
            y = ag.relu(y)
        lengths = (np.asarray(lengths) + 2 * (kh // 2) - kh) // st + 1
        return _mask_map(y, lengths), lengths
    if k == "residual_block":
        kh, kw = hp["kernel"]
        pad = (kh // 2, kw // 2)
        y = _mask_map(ag.relu(F.conv2d(x, p["conv1.W"], p["conv1.b"], (1, 1), pad)), lengths)
        y = F.conv2d(y, p["conv2.W"], p["conv2.b"], (1, 1), pad)
        return _mask_map(ag.relu(ag.add(y, x)), lengths), lengths
    x = _to_seq(x)
    if k == "lstm":
        return F.lstm_layer(x, p["W"], p["b"], length_mask(lengths, x.shape[1])), lengths
    if k == "blstm":
        mask = length_mask(lengths, x.shape[1])
        fw = F.lstm_layer(x, p["fw.W"], p["fw.b"], mask)
        bw = F.lstm_layer(x, p["bw.W"], p["bw.b"], mask, reverse=True)
        return ag.concat([fw, bw], axis=-1), lengths
    if k == "layer_norm":
        return _mask_seq(F.layer_norm(x, p["gain"], p["bias"]), lengths), lengths
    if k == "linear":
        y = ag.matmul(x, p["W"])
        if "b" in p:
            y = ag.add(y, p["b"])
        return _mask_seq(y, lengths), lengths
    factor, mode = hp["factor"], hp["mode"]
    B, T, D = x.shape
    new_lengths = -(-np.asarray(lengths) // factor)
    if mode == "subsample":
        return x[:, ::factor], new_lengths
    pad = (-T) % factor
    if pad:
        x = ag.concat([x, Tensor(np.zeros((B, pad, D)))], axis=1)
    return ag.reshape(x, (B, (T + pad) // factor, factor * D)), new_lengths


def apply_stack(specs, params: Mapping[str, Tensor], x: Tensor, lengths, prefix: str = ""):
    lengths = np.asarray(lengths)
    for i, spec in enumerate(specs):
        sub = {name: params[f"{prefix}{i}.{name}"] for name in param_shapes(spec)}
        x, lengths = apply_layer(spec, sub, x, lengths)
    return x, lengths


@dataclass
class ForwardResult:
    output: Tensor
    lengths: np.ndarray
    mode: str
    params: dict[str, Tensor]
    input: Tensor


def forward(specs, params: Mapping[str, np.ndarray], x, mode: str = "eval", lengths=None) -> ForwardResult:
    """Evaluate a layer stack on a batch (B, T, D).

    ``train`` mode records the graph that ``backward`` needs; ``eval`` does not.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    shape = x.shape[1:]
    try:
        stack_output_shape(specs, shape)
    except ShapeError as e:
        raise ShapeError(f"input shape {shape}: {e}") from None
    if lengths is None:
        lengths = np.full(x.shape[0], x.shape[1] if x.ndim == 3 else x.shape[2])
    train = mode == "train"
    tparams = {k: Tensor(v, requires_grad=train) for k, v in params.items()}
    inp = Tensor(x, requires_grad=train)
    if train:
        out, out_lengths = apply_stack(specs, tparams, inp, lengths)
    else:
        with ag.no_grad():
            out, out_lengths = apply_stack(specs, tparams, inp, lengths)
    return ForwardResult(out, out_lengths, mode, tparams, inp)


class BackwardError(RuntimeError):
    pass


def backward(result: ForwardResult, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``sum(output * upstream)`` for every parameter and the input."""
    if result.mode != "train":
        raise BackwardError("backward requires a forward pass run in train mode")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != result.output.shape:
        raise ShapeError(f"upstream gradient shape {upstream.shape} != output shape {result.output.shape}")
    for t in (*result.params.values(), result.input):
        t.zero_grad()
    if result.output.requires_grad:
        result.output.backward(upstream)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in result.params.items()}
    gin = result.input.grad if result.input.grad is not None else np.zeros_like(result.input.data)
    return grads, gin
