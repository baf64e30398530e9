"""Mini-batch training for both model families.

Shuffling and schedule sampling draw from generators seeded by
``(seed, epoch[, batch])``, and parameters plus Adam moments are rounded to
their f32 storage values whenever a checkpoint is written. Resuming from a
checkpoint therefore continues exactly as the uninterrupted run would.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import attention as att
from .config import ExperimentConfig
from .ctc import min_frames
from .features import CMVNStats, FeatureMatrix, apply_cmvn, fbank_from_wav, read_features
from .formats import Manifest
from .models import FAMILY_KIND, build_model, load_model, save_model
from .nnet import layers as L
from .nnet.autograd import Tensor, no_grad
from .nnet.checkpoint import round_to_storage
from .nnet.optim import OptimizerState, adam_step
from .units import Lexicon, LexiconError, UnitKind, UnitVocabulary, VocabularyError, encode_transcript


class TrainingError(ValueError):
    """Invalid training inputs, detected before any update is made."""


@dataclass
class Dataset:
    utt_ids: list[str]
    feats: list[np.ndarray]
    targets: list[list[int]]

    def __len__(self) -> int:
        return len(self.utt_ids)


@dataclass
class TrainResult:
    model: object
    history: list[dict] = field(default_factory=list)
    checkpoint: str = ""
    stopped_early: bool = False


def load_feature_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return fbank_from_wav(path).frames
    return read_features(path).frames


def load_dataset(manifest_path, vocab: UnitVocabulary, lexicon: Lexicon | None = None, cmvn: CMVNStats | None = None) -> Dataset:
    manifest = Manifest.read(manifest_path)
    if not manifest:
        raise TrainingError(f"{manifest_path}: manifest is empty")
    if vocab.unit_kind != UnitKind.CHARACTER and lexicon is None:
        raise TrainingError(f"{vocab.unit_kind.value} units need a lexicon ([data] lexicon)")
    ids, feats, targets = [], [], []
    for rec in manifest:
        try:
            target = encode_transcript(rec.transcript, vocab, lexicon)
        except (LexiconError, VocabularyError) as e:
            raise TrainingError(f"{rec.utt_id}: {e}") from None
        if not target:
            raise TrainingError(f"{rec.utt_id}: empty transcript")
        x = load_feature_matrix(manifest.resolve(rec))
        if cmvn is not None:
            x = apply_cmvn(FeatureMatrix(x), cmvn).frames
        ids.append(rec.utt_id)
        feats.append(x)
        targets.append(target)
    return Dataset(ids, feats, targets)


def pad_batch(feats: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    out = np.zeros((len(feats), int(lengths.max()), feats[0].shape[1]))
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    return out, lengths


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def schedule_sampling_prob(epoch: int, total_epochs: int, p_max: float, ramp: float) -> float:
    """Linear ramp from 0 at the first epoch to ``p_max`` after ``ramp`` of training."""
    span = ramp * total_epochs
    if p_max == 0 or span <= 0:
        return p_max
    return p_max * min(1.0, epoch / span)


def check_dataset(model, data: Dataset) -> None:
    """Reject utterances the model cannot be trained on."""
    feat_dim = model.cfg.feat_dim
    for utt, x, y in zip(data.utt_ids, data.feats, data.targets):
        if x.ndim != 2 or x.shape[1] != feat_dim:
            raise TrainingError(f"{utt}: features have shape {x.shape}, model expects dim {feat_dim}")
        if model.family == "ctc":
            T_out = L.stack_output_shape(model.specs, (x.shape[0], feat_dim))[0]
            if T_out < min_frames(y):
                raise TrainingError(f"{utt}: {T_out} output frames cannot align {len(y)} labels")


def _batch_loss(model, params, x, lengths, targets, tcfg, p_ss, unigram, rng):
    p = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    if model.family == "ctc":
        loss = model.loss(x, lengths, targets, p)
    else:
        loss = model.loss(x, lengths, targets, p, p_ss=p_ss, smoothing=tcfg.label_smoothing, unigram=unigram, rng=rng)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in p.items()}
    return float(loss.data), grads


def evaluate_loss(model, data: Dataset, batch_size: int, unigram=None, smoothing: float = 0.0) -> float:
    """Mean batch loss without updates (teacher forcing for attention)."""
    total, n = 0.0, 0
    with no_grad():
        p = {k: Tensor(v) for k, v in model.params.items()}
        for i in range(0, len(data), batch_size):
            idx = range(i, min(i + batch_size, len(data)))
            x, lengths = pad_batch([data.feats[j] for j in idx])
            targets = [data.targets[j] for j in idx]
            if model.family == "ctc":
                loss = model.loss(x, lengths, targets, p)
            else:
                loss = model.loss(x, lengths, targets, p, smoothing=smoothing, unigram=unigram)
            total += float(loss.data) * len(targets)
            n += len(targets)
    return total / n


def _optimizer_header(opt: OptimizerState) -> dict:
    return {
        "lr_start": opt.lr_start, "lr_end": opt.lr_end, "total_epochs": opt.total_epochs,
        "weight_decay": opt.weight_decay, "clip_norm": opt.clip_norm, "beta1": opt.beta1,
        "beta2": opt.beta2, "eps": opt.eps, "step": opt.step, "epoch": opt.epoch,
    }


def _moments(opt: OptimizerState) -> dict[str, np.ndarray]:
    return {**{f"adam.m.{k}": v for k, v in opt.m.items()}, **{f"adam.v.{k}": v for k, v in opt.v.items()}}


def save_training_state(path, model, opt: OptimizerState, epochs_done: int, config_hash: str, unigram=None) -> None:
    round_to_storage(model.params)
    round_to_storage(opt.m)
    round_to_storage(opt.v)
    extra = _moments(opt)
    if unigram is not None:
        extra["train.unigram"] = unigram
    header = {"epochs_done": epochs_done, "optimizer": _optimizer_header(opt), "config_hash": config_hash}
    save_model(path, model, header, extra)


def restore_training_state(path):
    model, header, extra = load_model(path)
    o = header.get("optimizer")
    if o is None or "epochs_done" not in header:
        raise TrainingError(f"{path}: checkpoint has no optimizer state to resume from")
    opt = OptimizerState(**o)
    opt.m = {k[len("adam.m."):]: v for k, v in extra.items() if k.startswith("adam.m.")}
    opt.v = {k[len("adam.v."):]: v for k, v in extra.items() if k.startswith("adam.v.")}
    return model, opt, int(header["epochs_done"]), extra.get("train.unigram")


def train(
    cfg: ExperimentConfig,
    train_data: Dataset | None = None,
    vocab: UnitVocabulary | None = None,
    valid_data: Dataset | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train per ``cfg``; datasets and vocabulary load from ``cfg.data`` when not given.

    Writes ``epochNNN.e2em`` and ``last.e2em`` after every epoch and appends one
    JSON line per epoch to ``train_log.jsonl`` in ``cfg.train.checkpoint_dir``.
    """
    tcfg = cfg.train
    family = cfg.model.family
    model_cfg = cfg.ctc_model if family == "ctc" else cfg.attention_model
    if vocab is None:
        if not cfg.data.vocab:
            raise TrainingError("[data] vocab is required")
        vocab = UnitVocabulary.read(cfg.data.vocab)
    if vocab.model_kind != FAMILY_KIND[family]:
        raise TrainingError(f"[data] vocab is a {vocab.model_kind.value} vocabulary but [model] family is {family}")
    lexicon = Lexicon.from_file(cfg.data.lexicon) if cfg.data.lexicon else None
    if vocab.unit_kind != UnitKind.CHARACTER and lexicon is None:
        raise TrainingError(f"{vocab.unit_kind.value} vocabulary needs [data] lexicon")
    cmvn = CMVNStats.load(cfg.data.cmvn) if cfg.data.cmvn else None
    if train_data is None:
        if not cfg.data.train_manifest:
            raise TrainingError("[data] train_manifest is required")
        train_data = load_dataset(cfg.data.train_manifest, vocab, lexicon, cmvn)
    if valid_data is None and cfg.data.valid_manifest:
        valid_data = load_dataset(cfg.data.valid_manifest, vocab, lexicon, cmvn)

    out_dir = Path(tcfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit = log or (lambda s: None)

    if tcfg.resume:
        model, opt, start_epoch, unigram = restore_training_state(tcfg.resume)
        if model.family != family or model.vocab.fingerprint != vocab.fingerprint:
            raise TrainingError(f"{tcfg.resume}: checkpoint does not match the configured family/vocabulary")
        opt.total_epochs = tcfg.epochs
    else:
        model = build_model(family, model_cfg, vocab, tcfg.seed, tcfg.init, tcfg.init_variance)
        opt = OptimizerState(tcfg.lr_start, tcfg.lr_end, tcfg.epochs, tcfg.weight_decay, tcfg.clip_norm)
        start_epoch = 0
        unigram = None
        if family == "attention":
            # stored as f32 in checkpoints; round now so resumed runs see the same values
            unigram = att.unigram_distribution(train_data.targets, vocab).astype(np.float32).astype(np.float64)
    check_dataset(model, train_data)
    if valid_data is not None:
        check_dataset(model, valid_data)

    log_path = out_dir / "train_log.jsonl"
    result = TrainResult(model)
    t0 = time.monotonic()
    ckpt = ""
    for epoch in range(start_epoch, tcfg.epochs):
        opt.epoch = epoch
        p_ss = schedule_sampling_prob(epoch, tcfg.epochs, tcfg.p_ss_max, tcfg.p_ss_ramp) if family == "attention" else 0.0
        total, count = 0.0, 0
        for bi, idx in enumerate(batches(len(train_data), tcfg.batch_size, tcfg.seed, epoch)):
            x, lengths = pad_batch([train_data.feats[i] for i in idx])
            targets = [train_data.targets[i] for i in idx]
            rng = np.random.default_rng([tcfg.seed, epoch, bi])
            loss, grads = _batch_loss(model, model.params, x, lengths, targets, tcfg, p_ss, unigram, rng)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch + 1}, batch {bi}")
            adam_step(opt, model.params, grads)
            total += loss * len(idx)
            count += len(idx)
        record = {
            "epoch": epoch + 1,
            "loss": total / count,
            "lr": opt.lr,
            "p_ss": p_ss,
            "step": opt.step,
            "seconds": round(time.monotonic() - t0, 3),
            "config_hash": cfg.hash,
        }
        if valid_data is not None:
            record["valid_loss"] = evaluate_loss(model, valid_data, tcfg.batch_size, unigram, tcfg.label_smoothing)
        ckpt = str(out_dir / f"epoch{epoch + 1:03d}.e2em")
        save_training_state(ckpt, model, opt, epoch + 1, cfg.hash, unigram)
        save_training_state(out_dir / "last.e2em", model, opt, epoch + 1, cfg.hash, unigram)
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        result.history.append(record)
        emit(json.dumps(record, sort_keys=True))
        if tcfg.max_minutes is not None and time.monotonic() - t0 > 60 * tcfg.max_minutes:
            result.stopped_early = epoch + 1 < tcfg.epochs
            break
    result.checkpoint = ckpt
    return result
