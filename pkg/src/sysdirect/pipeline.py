"""Glue between the corpus, features, models and metrics."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import FeatureSequence, NormalizationStats, apply_normalization, extract_many, fit_normalization
from .metrics import ScoredUtterance, det_curve, eer
from .models import SYSTEM, Model, ModelConfig, build
from .synth import Manifest, load_manifest
from .trainer import Example, TrainConfig, train


def worker_count() -> int:
    """Thread cap from ``DS_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("DS_THREADS", "1")))
    except ValueError:
        return 1


def featurize(manifest: Manifest, split: str) -> tuple[list[FeatureSequence], list[str]]:
    items = list(manifest.clips(split))
    if not items:
        raise DataError(f"split {split!r} is empty")
    feats = extract_many([clip for clip, _, _ in items], workers=worker_count())
    return feats, [label for _, label, _ in items]


def to_examples(feats, labels, stats: NormalizationStats, dtype=np.float32) -> list[Example]:
    return [Example(apply_normalization(f, stats).frames.astype(dtype), int(lab == "system"), f.id)
            for f, lab in zip(feats, labels)]


def score_features(model: Model, feats, labels, batch_size: int = 32) -> list[ScoredUtterance]:
    """Posterior of the system class for raw (un-normalized) features."""
    from . import autodiff as ad
    from .trainer import pad_batch

    examples = to_examples(feats, labels, model.normalization, model.dtype)
    order = sorted(range(len(examples)), key=lambda i: examples[i].frames.shape[0])
    scores = np.zeros(len(examples))
    with ad.no_grad():
        for k in range(0, len(order), batch_size):
            chunk = order[k:k + batch_size]
            batch = pad_batch([examples[i] for i in chunk])
            logits, _, _ = model.logits(batch.x, batch.lengths)
            scores[chunk] = ad.softmax(logits, axis=1).data[:, SYSTEM]
    return [ScoredUtterance(f.id, lab, float(np.clip(s, 0.0, 1.0)))
            for f, lab, s in zip(feats, labels, scores)]


@dataclass
class PreparedCorpus:
    manifest: Manifest
    stats: NormalizationStats
    train: list[Example]
    val: list[Example]
    test_feats: list[FeatureSequence]
    test_labels: list[str]


def prepare(manifest: Manifest | str | Path) -> PreparedCorpus:
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    tr_f, tr_l = featurize(manifest, "train")
    va_f, va_l = featurize(manifest, "val")
    te_f, te_l = featurize(manifest, "test")
    stats = fit_normalization(tr_f)
    return PreparedCorpus(manifest, stats, to_examples(tr_f, tr_l, stats), to_examples(va_f, va_l, stats),
                          te_f, te_l)


def train_variant(corpus: PreparedCorpus, variant: str, seed: int = 0,
                  config: TrainConfig | None = None, log_path=None) -> tuple[Model, list[dict]]:
    config = config or TrainConfig(seed=seed)
    model = build(ModelConfig(variant), seed=seed)
    model.normalization = corpus.stats
    return train(model, corpus.train, corpus.val, config, log_path)


def split_eer(model: Model, corpus: PreparedCorpus) -> float:
    return eer(det_curve(score_features(model, corpus.test_feats, corpus.test_labels)))
