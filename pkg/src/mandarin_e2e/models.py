"""Checkpoint <-> model objects for both families.

The header records the family, model config, layer list and the unit
vocabulary, so a checkpoint is self-describing at decode time.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .attention import LasModel, LasModelConfig
from .ctc import CtcModel, CtcModelConfig
from .nnet import layers as L
from .nnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .units import ModelKind, UnitKind, UnitVocabulary

FAMILY_KIND = {"ctc": ModelKind.CTC, "attention": ModelKind.ATTENTION}


def build_model(family: str, model_cfg, vocab: UnitVocabulary, seed: int, policy: str, variance: float):
    if FAMILY_KIND.get(family) != vocab.model_kind:
        raise ValueError(f"a {family} model needs a {FAMILY_KIND.get(family)} vocabulary, got {vocab.model_kind.value}")
    if family == "ctc":
        model = CtcModel.build(model_cfg, len(vocab), seed, policy, variance)
        model.cfg, model.vocab = model_cfg, vocab
        return model
    return LasModel.build(model_cfg, vocab, seed, policy, variance)


def vocab_header(vocab: UnitVocabulary) -> dict:
    return {
        "units": list(vocab.units),
        "unit_kind": vocab.unit_kind.value,
        "model_kind": vocab.model_kind.value,
        "fingerprint": vocab.fingerprint,
    }


def model_header(model) -> dict:
    return {
        "family": model.family,
        "model_config": dataclasses.asdict(model.cfg),
        "layers": [s.to_dict() for s in model.specs],
        "vocab": vocab_header(model.vocab),
    }


def save_model(path, model, extra_header: dict | None = None, extra: dict | None = None) -> None:
    save_checkpoint(path, {**model_header(model), **(extra_header or {})}, model.params, extra)


def _vocab_from_header(h: dict) -> UnitVocabulary:
    vocab = UnitVocabulary(UnitKind(h["unit_kind"]), ModelKind(h["model_kind"]), tuple(h["units"]))
    if vocab.fingerprint != h["fingerprint"]:
        raise CheckpointError("vocabulary fingerprint in checkpoint header does not match its units")
    return vocab


def _config(cls, d: dict):
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            v = d[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def load_model(path):
    """Return ``(model, header, extra)`` for a checkpoint of either family."""
    header, params, extra = load_checkpoint(path)
    try:
        family = header["family"]
        vocab = _vocab_from_header(header["vocab"])
        if family == "ctc":
            cfg = _config(CtcModelConfig, header["model_config"])
            model = CtcModel([L.LayerSpec.from_dict(d) for d in header["layers"]], params)
            model.cfg, model.vocab = cfg, vocab
            expected = L.stack_param_shapes(model.specs)
        elif family == "attention":
            cfg = _config(LasModelConfig, header["model_config"])
            model = LasModel(cfg, vocab, params)
            expected = LasModel.param_shapes(cfg, len(vocab))
        else:
            raise CheckpointError(f"unknown model family {family!r} in checkpoint header")
    except KeyError as e:
        raise CheckpointError(f"{path}: checkpoint header lacks {e}") from None
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != {k: tuple(v) for k, v in expected.items()}:
        raise CheckpointError(f"{path}: parameter tensors do not match the declared {family} architecture")
    if FAMILY_KIND[family] != vocab.model_kind:
        raise CheckpointError(f"{path}: {family} checkpoint carries a {vocab.model_kind.value} vocabulary")
    return model, header, extra


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}
