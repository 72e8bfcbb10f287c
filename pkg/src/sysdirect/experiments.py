"""Reusable experiment drivers on the synthetic corpus.

Used by ``scripts/`` and by the acceptance suite.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UnsupportedVariantError
from .metrics import read_word_alignments
from .models import VARIANTS, Model, has_attention
from .pipeline import PreparedCorpus, prepare, split_eer, train_variant
from .synth import PRESETS, SynthSpec, generate
from .trainer import TrainConfig


@dataclass
class RunResult:
    variant: str
    seed: int
    epochs: int
    best_train_acc: float
    eer: float
    seconds: float
    model: Model
    history: list[dict]


def make_corpus(spec: SynthSpec | str, root: str | Path, seed: int | None = None) -> PreparedCorpus:
    """Generate ``spec`` (optionally reseeded) under ``root`` and extract features."""
    if isinstance(spec, str):
        spec = PRESETS[spec]
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    return prepare(generate(spec, root))


def run_variant(corpus: PreparedCorpus, variant: str, seed: int = 0, max_epochs: int = 20,
                **train_kwargs) -> RunResult:
    start = time.perf_counter()
    config = TrainConfig(seed=seed, max_epochs=max_epochs, **train_kwargs)
    model, history = train_variant(corpus, variant, seed, config)
    rate = split_eer(model, corpus)
    return RunResult(variant, seed, len(history), max(r["train_acc"] for r in history), rate,
                     time.perf_counter() - start, model, history)


def attention_localization(model: Model, corpus: PreparedCorpus) -> float:
    """Fraction of test utterances whose attention argmax falls inside the ``burst`` word."""
    if not has_attention(model.config.variant):
        raise UnsupportedVariantError(f"{model.config.variant} has no attention layer")
    rows = corpus.manifest.split("test")
    hits = []
    for feats, row in zip(corpus.test_feats, rows):
        words = corpus.manifest.words_path(row)
        if words is None:
            continue
        (_, s0, s1), = [w for w in read_word_alignments(words) if w[0] == "burst"]
        _, trace = model.forward(feats, normalize=True)
        peak = trace.times[int(np.argmax(trace.alpha))]
        hits.append(s0 <= peak <= s1)
    if not hits:
        raise DataError("test split carries no burst alignments")
    return float(np.mean(hits))


def ordering(results: list[RunResult]) -> dict[str, float]:
    """Seed-averaged EER per variant."""
    return {v: float(np.mean([r.eer for r in results if r.variant == v]))
            for v in VARIANTS if any(r.variant == v for r in results)}
