"""Whole-model gradient check at float64, reported per layer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import ModelConfig, build

TOLERANCE = 1e-4


@dataclass
class LayerCheck:
    error: float = 0.0
    checked: int = 0
    kinks: int = 0
    unresolved: int = 0


@dataclass
class GradReport:
    variant: str
    layers: dict[str, LayerCheck] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(c.error for c in self.layers.values())

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.worst < tol and all(c.checked > 0 for c in self.layers.values())


def model_grad_check(variant: str, seed: int = 0, lengths=None, max_entries: int = 12,
                     h: float = 1e-5, tol: float = TOLERANCE) -> GradReport:
    """Conv -> pooling -> dense -> softmax -> cross-entropy against central differences.

    One random input per length in ``lengths``; ``max_entries`` coordinates of
    every parameter tensor are perturbed per input.  Coordinates straddling a
    ReLU kink, or with gradients below the finite-difference resolution at
    ``tol``, are replaced by fresh draws and counted in the report.
    """
    config = ModelConfig(variant)
    lengths = lengths or (config.conv_kw, 30, 77)
    model = build(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        if p.name.endswith("bias"):
            p.data[:] = rng.uniform(-0.1, 0.1, p.shape)
    report = GradReport(variant, {name: LayerCheck() for name in model.layers()})
    for k, t in enumerate(lengths):
        x = rng.standard_normal((1, t, 45))
        target = np.eye(2)[[rng.integers(2)]]

        def loss():
            logits, _, _ = model.logits(x)
            return -ad.reduce_sum(ad.log_softmax(logits, axis=1) * target)

        for layer, params in model.layers().items():
            stats: dict = {}
            errs = ad.grad_errors(loss, {p.name: p for p in params}, h=h, max_entries=max_entries,
                                  seed=seed + k, resolve_tol=tol, stats=stats)
            entry = report.layers[layer]
            entry.error = max(entry.error, max(errs.values()))
            for s in stats.values():
                entry.checked += s["checked"]
                entry.kinks += s["kinks"]
                entry.unresolved += s["unresolved"]
    return report

