"""Synthetic corpora: each unit owns a fixed random feature template.

An utterance is a unit sequence drawn from a seeded Markov chain, rendered as
the concatenation of its units' templates plus Gaussian noise. Templates and
the chain depend only on ``template_seed``, so train and test corpora built
with different ``seed`` values share them.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import write_features
from .formats import Manifest, ManifestRecord
from .units import Lexicon, UnitKind, UnitVocabulary, parse_syllable, standard_inventory

COMMON_CHARS = (
    "的一是不了人我在有他这中大来上国个到说们为子和你地出道也时年得就那要下以生会自着去之过家学对可里后小么心多天而能好都然没日于起还发成事只作"
)


@dataclass
class SynthCorpus:
    manifest: Manifest
    units: list[list[str]]
    alignments: list[np.ndarray]
    templates: dict[str, np.ndarray]


def character_vocabulary(n_units: int, model_kind) -> UnitVocabulary:
    if not 1 <= n_units <= len(COMMON_CHARS):
        raise ValueError(f"n_units must be in [1, {len(COMMON_CHARS)}]")
    return UnitVocabulary.from_units(COMMON_CHARS[:n_units], UnitKind.CHARACTER, model_kind)


def toy_lexicon(chars, seed: int = 0) -> Lexicon:
    """Give each character its own tonal syllable, so syllable and CDP units are derivable."""
    inv = standard_inventory()
    syllables = sorted(f"{i}{f}{t}" for i in inv.initials for f in ("a", "i", "u", "ao", "an") for t in (1, 2, 3, 4))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(syllables), size=len(chars), replace=False)
    return Lexicon((c, parse_syllable(syllables[k])) for c, k in zip(chars, picked))


def make_templates(units, feat_dim: int, frames: tuple[int, int], template_seed: int) -> tuple[dict[str, np.ndarray], np.ndarray]:
    rng = np.random.default_rng(template_seed)
    templates = {}
    for u in units:
        n = int(rng.integers(frames[0], frames[1] + 1))
        templates[u] = rng.normal(0.0, 1.0, size=(n, feat_dim))
    # row i: transition distribution out of unit i; last row: start distribution
    transitions = rng.dirichlet(np.full(len(units), 0.5), size=len(units) + 1)
    return templates, transitions


def synth_corpus(
    seed: int,
    vocab: UnitVocabulary,
    n_utts: int,
    length_range: tuple[int, int] = (2, 6),
    out_dir=None,
    name: str = "corpus",
    feat_dim: int = 40,
    template_frames: tuple[int, int] = (4, 8),
    noise: float = 0.3,
    template_seed: int = 0,
) -> SynthCorpus:
    """Generate ``n_utts`` utterances; with ``out_dir`` set, write FBK1 files and a manifest."""
    if vocab.unit_kind != UnitKind.CHARACTER:
        raise ValueError("synthetic corpora are generated over character units; derive syllables with toy_lexicon")
    units = list(vocab.content_units)
    if not units:
        raise ValueError("vocabulary has no content units")
    templates, transitions = make_templates(units, feat_dim, template_frames, template_seed)
    rng = np.random.default_rng(seed)
    manifest = Manifest()
    all_units, alignments = [], []
    feat_dir = None
    if out_dir is not None:
        feat_dir = Path(out_dir) / f"{name}_feats"
        feat_dir.mkdir(parents=True, exist_ok=True)
        manifest.base = Path(out_dir)
    for n in range(n_utts):
        length = int(rng.integers(length_range[0], length_range[1] + 1))
        seq = []
        state = len(units)
        for _ in range(length):
            state = int(rng.choice(len(units), p=transitions[state]))
            seq.append(units[state])
        clean = np.concatenate([templates[u] for u in seq])
        align = np.concatenate([np.full(len(templates[u]), units.index(u)) for u in seq])
        feats = clean + noise * rng.normal(size=clean.shape)
        utt_id = f"{name}_{n:05d}"
        rel = f"{name}_feats/{utt_id}.fbk"
        if feat_dir is not None:
            write_features(Path(out_dir) / rel, feats)
        manifest.append(ManifestRecord(utt_id, rel, "".join(seq)))
        all_units.append(seq)
        alignments.append(align)
    if out_dir is not None:
        manifest.write(Path(out_dir) / f"{name}.tsv")
    return SynthCorpus(manifest, all_units, alignments, templates)
