"""Command-line entry point: ``mandarin-e2e <command> ...``.

Exit status is 0 on success, 1 when inputs fail validation (bad flags,
malformed files, inconsistent configs) and 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .features import CMVNStats, FbankConfig, FeatureError, accumulate_cmvn, fbank_from_wav, read_features, write_features
from .formats import Manifest, ManifestRecord, read_hypotheses

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="experiment INI file (see configs/)")
    p.add_argument("--seed", type=int, help="random seed; overrides [train] seed where relevant")
    p.add_argument("--threads", type=int, default=1, help="workers for per-utterance work (default 1)")
    return p


def _load_config(args):
    from .config import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- commands -------------------------------------------------------------


def cmd_prep(args) -> int:
    manifest = Manifest.read(args.manifest)
    out_dir = Path(args.out_dir)
    feat_dir = out_dir / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    fb = FbankConfig(sample_rate=args.sample_rate)

    def run(rec):
        src = manifest.resolve(rec)
        if src.suffix.lower() == ".wav":
            feats = fbank_from_wav(src, fb, rec.utt_id)
        else:
            feats = read_features(src, rec.utt_id)
        dest = feat_dir / f"{rec.utt_id}.fbk"
        write_features(dest, feats.frames)
        return feats

    feats = _map(run, manifest, args.threads)
    if not feats:
        raise FeatureError("manifest is empty")
    stats = CMVNStats.empty(feats[0].dim)
    for f in feats:
        stats = accumulate_cmvn(stats, f)
    out = Manifest(ManifestRecord(r.utt_id, f"feats/{r.utt_id}.fbk", r.transcript) for r in manifest)
    name = Path(args.manifest).stem
    out.write(out_dir / f"{name}.tsv")
    stats.save(out_dir / "cmvn.npz")
    print(f"wrote {len(out)} feature files, {out_dir / (name + '.tsv')} and {out_dir / 'cmvn.npz'} ({stats.count} frames)")
    return EXIT_OK


def cmd_vocab(args) -> int:
    from .units import Lexicon, build_vocabulary

    manifest = Manifest.read(args.manifest, check_files=False)
    lex = Lexicon.from_file(args.lexicon) if args.lexicon else None
    vocab, coverage = build_vocabulary(
        [r.transcript for r in manifest], args.unit_kind, args.model, lex, args.char_budget, args.min_count
    )
    vocab.write(args.out)
    print(f"{len(vocab.content_units)} units + {len(vocab) - len(vocab.content_units)} specials -> {args.out}; token coverage {100 * coverage:.2f}%")
    return EXIT_OK


def cmd_lm_train(args) -> int:
    from .lm import perplexity, train_lm, units_for
    from .units import Lexicon, UnitVocabulary, transcript_units

    manifest = Manifest.read(args.manifest, check_files=False)
    vocab = UnitVocabulary.read(args.vocab)
    lex = Lexicon.from_file(args.lexicon) if args.lexicon else None
    units = units_for(vocab)
    known = set(units)
    unk = "<unk>" if "<unk>" in known else None
    corpus = []
    for rec in manifest:
        seq = transcript_units(rec.transcript, vocab.unit_kind, lex, strict=unk is None)
        if unk is not None:
            seq = [u if u in known else unk for u in seq]
        corpus.append(seq)
    lm = train_lm(corpus, order=args.order, units=units)
    lm.save(args.out)
    if args.arpa:
        Path(args.arpa).write_text(lm.to_arpa(), encoding="utf-8")
    print(f"{args.order}-gram over {len(units)} units -> {args.out}; training perplexity {perplexity(lm, corpus):.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _load_config(args)
    if args.resume:
        cfg.train.resume = args.resume
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.checkpoint_dir:
        cfg.train.checkpoint_dir = args.checkpoint_dir
    print(json.dumps({"config_hash": cfg.hash, "family": cfg.model.family}))
    result = train(cfg, log=print)
    print(f"final checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_decode(args) -> int:
    from .config import validate
    from .decode import Decoder, decode_manifest
    from .models import load_model

    cfg = _load_config(args)
    d = cfg.decode
    for key in ("beam_width", "alpha", "beta_wc", "gamma", "beta_cov", "lam", "tau", "max_len", "lm", "transduce_lexicon", "char_lm"):
        value = getattr(args, key)
        if value is not None:
            setattr(d, key, value)
    if args.greedy:
        d.greedy = True
    validate(cfg)
    model, header, _ = load_model(args.checkpoint)
    cmvn_path = args.cmvn or cfg.data.cmvn
    cmvn = CMVNStats.load(cmvn_path) if cmvn_path else None
    decoder = Decoder(model, d)
    n = decode_manifest(decoder, args.manifest, args.out, cmvn, args.threads, args.dump_attention)
    print(f"decoded {n} utterances with a {header['family']} model -> {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    from .scoring import ScoringError, corpus_report
    from .units import Lexicon, transcript_units

    hyps = read_hypotheses(args.hyp)
    refs = Manifest.read(args.manifest, check_files=False)
    ref_ids = [r.utt_id for r in refs]
    if set(hyps) != set(ref_ids):
        missing = sorted(set(ref_ids) - set(hyps))[:5]
        extra = sorted(set(hyps) - set(ref_ids))[:5]
        raise ScoringError(f"utterance ids differ: missing {missing}, unexpected {extra}")
    lex = Lexicon.from_file(args.lexicon) if args.lexicon else None
    pairs = []
    for r in refs:
        ref = transcript_units(r.transcript, args.units, lex)
        hyp = hyps[r.utt_id]
        if args.units == "Character":
            hyp = list("".join(hyp))
        pairs.append((r.utt_id, ref, hyp))
    report = corpus_report(pairs)
    label = "CER" if args.units == "Character" else "PER" if args.units == "CDP" else "SER"
    print(report.summary().replace("CER", label, 1))
    if args.report:
        payload = {
            "errors": report.errors, "ref_length": report.ref_length, "rate": report.cer,
            "substitutions": report.substitutions, "deletions": report.deletions, "insertions": report.insertions,
            "utterances": {u: dataclasses.asdict(e) | {"rate": e.cer} for u, e in report.utterances.items()},
        }
        Path(args.report).write_text(json.dumps(payload, indent=1, sort_keys=True, ensure_ascii=False), encoding="utf-8")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import character_vocabulary, synth_corpus, toy_lexicon

    seed = args.seed if args.seed is not None else 0
    if args.min_len < 1 or args.max_len < args.min_len:
        raise UsageError("need 1 <= --min-len <= --max-len")
    vocab = character_vocabulary(args.n_units, args.model)
    out = Path(args.out_dir)
    corpus = synth_corpus(
        seed, vocab, args.n_utts, (args.min_len, args.max_len), out, args.name,
        feat_dim=args.feat_dim, noise=args.noise, template_seed=args.template_seed,
    )
    vocab.write(out / "vocab.txt")
    toy_lexicon(vocab.content_units, args.template_seed).write(out / "lexicon.txt")
    print(f"{len(corpus.manifest)} utterances over {args.n_units} units -> {out / (args.name + '.tsv')}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="mandarin-e2e", description="Mandarin end-to-end ASR toolkit (CTC and attention).")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", parents=[common], help="extract fbank features and global CMVN stats")
    p.add_argument("--manifest", required=True, help="TSV of utt_id, wav or FBK1 path, transcript")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("vocab", parents=[common], help="build a unit vocabulary from transcripts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--unit-kind", choices=["CDP", "Syllable", "Character"], default="Character")
    p.add_argument("--model", choices=["CTC", "Attention"], default="CTC")
    p.add_argument("--lexicon")
    p.add_argument("--char-budget", type=int)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("lm-train", parents=[common], help="train a unit n-gram LM on manifest transcripts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--arpa", help="also write an ARPA text export")
    p.set_defaults(func=cmd_lm_train)

    p = sub.add_parser("train", parents=[common], help="train a model from a config file")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", parents=[common], help="decode a manifest to a hypothesis TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cmvn")
    p.add_argument("--lm", help="unit LM for shallow fusion")
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--alpha", type=float, help="CTC LM weight")
    p.add_argument("--beta-wc", dest="beta_wc", type=float, help="CTC unit-count weight")
    p.add_argument("--gamma", type=float, help="attention length normalization exponent")
    p.add_argument("--beta-cov", dest="beta_cov", type=float, help="attention coverage weight")
    p.add_argument("--lam", type=float, help="attention LM weight")
    p.add_argument("--tau", type=float, help="coverage threshold")
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--transduce-lexicon", dest="transduce_lexicon")
    p.add_argument("--char-lm", dest="char_lm")
    p.add_argument("--dump-attention", help="directory for per-utterance attention matrices (FBK1)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", parents=[common], help="error rate of a hypothesis file against a manifest")
    p.add_argument("--hyp", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--units", choices=["CDP", "Syllable", "Character"], default="Character")
    p.add_argument("--lexicon")
    p.add_argument("--report", help="write a JSON report with per-utterance counts")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--name", default="train")
    p.add_argument("--n-utts", type=int, default=500)
    p.add_argument("--n-units", type=int, default=20)
    p.add_argument("--model", choices=["CTC", "Attention"], default="CTC")
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--max-len", type=int, default=6)
    p.add_argument("--feat-dim", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--template-seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - top-level boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
