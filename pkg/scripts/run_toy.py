#!/usr/bin/env python3
"""Toy end-to-end run: synthesize a corpus, train both model families, decode, score.

Writes everything under --work (default ./work/toy) and prints one CER line per
(model, LM weight). The shipped configs/ctc_toy.ini and configs/attention_toy.ini
point at this directory.
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from mandarin_e2e.config import load_config
from mandarin_e2e.decode import Decoder, decode_manifest
from mandarin_e2e.formats import Manifest, read_hypotheses
from mandarin_e2e.lm import train_lm, units_for
from mandarin_e2e.scoring import corpus_report
from mandarin_e2e.synth import character_vocabulary, synth_corpus
from mandarin_e2e.train import train
from mandarin_e2e.units import ModelKind

ROOT = Path(__file__).resolve().parent.parent


def make_corpus(work: Path, n_units: int, n_train: int, n_test: int, seed: int) -> None:
    vocab = character_vocabulary(n_units, ModelKind.CTC)
    synth_corpus(seed, vocab, n_train, out_dir=work, name="train")
    synth_corpus(seed + 1, vocab, n_test, out_dir=work, name="test")
    vocab.write(work / "vocab_ctc.txt")
    vocab.with_model_kind(ModelKind.ATTENTION).write(work / "vocab_attention.txt")


def cer_of(hyp_path, manifest_path) -> float:
    hyps = read_hypotheses(hyp_path)
    refs = Manifest.read(manifest_path, check_files=False)
    return corpus_report((r.utt_id, list(r.transcript), list("".join(hyps[r.utt_id]))) for r in refs).cer


def run(work: Path, families=("ctc", "attention"), n_units: int = 20, n_train: int = 500, n_test: int = 50,
        seed: int = 1, lm_weight: float = 0.3, log=print) -> dict:
    """Train and decode each family; return ``{"<family>/lm<weight>": {"cer", "train_minutes"}}``."""
    work.mkdir(parents=True, exist_ok=True)
    make_corpus(work, n_units, n_train, n_test, seed)
    results = {}
    for family in families:
        cfg = load_config(ROOT / "configs" / f"{family}_toy.ini")
        cfg.data.train_manifest = str(work / "train.tsv")
        cfg.data.valid_manifest = ""
        cfg.data.vocab = str(work / f"vocab_{family}.txt")
        cfg.train.checkpoint_dir = str(work / f"exp_{family}")
        t0 = time.monotonic()
        res = train(cfg, log=log)
        minutes = (time.monotonic() - t0) / 60
        train_units = [list(r.transcript) for r in Manifest.read(work / "train.tsv", check_files=False)]
        decoder = Decoder(res.model, cfg.decode)
        lm = train_lm(train_units, order=4, units=units_for(res.model.vocab))
        for weight in (0.0, lm_weight):
            if family == "ctc":
                cfg.decode.alpha = weight
            else:
                cfg.decode.lam = weight
            decoder.lm = lm if weight else None
            out = work / f"hyp_{family}_lm{weight:g}.tsv"
            decode_manifest(decoder, work / "test.tsv", out)
            cer = cer_of(out, work / "test.tsv")
            results[f"{family}/lm{weight:g}"] = {"cer": cer, "train_minutes": minutes}
            log(f"{family:9s} LM weight {weight:<4g} CER {100 * cer:.2f}%  (training {minutes:.2f} min)")
    (work / "results.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    return results


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default=str(ROOT / "work" / "toy"))
    ap.add_argument("--families", nargs="+", default=["ctc", "attention"])
    ap.add_argument("--n-units", type=int, default=20)
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--lm-weight", type=float, default=0.3)
    args = ap.parse_args()
    run(Path(args.work), args.families, args.n_units, args.n_train, args.n_test, args.seed, args.lm_weight)


if __name__ == "__main__":
    main()
