"""DET curves, equal error rate, report files and attention traces.

System-directed speech is the positive class: a false positive accepts
non-system speech, a false negative rejects a system-directed request.
An utterance is predicted positive when ``score >= threshold``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ClassMissingError, DataError, FormatError, NumericError, UnsupportedVariantError
from .features import FeatureSequence
from .models import AttentionTrace, Model, has_attention

LABELS = ("non-system", "system")


@dataclass(frozen=True)
class ScoredUtterance:
    id: str
    label: str
    score: float

    def __post_init__(self):
        if self.label not in LABELS:
            raise FormatError(f"{self.id}: label must be one of {LABELS}, got {self.label!r}")
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise FormatError(f"{self.id}: score {self.score} outside [0, 1]")

    @property
    def positive(self) -> bool:
        return self.label == "system"


@dataclass(frozen=True)
class DetCurve:
    thresholds: np.ndarray  # increasing, starting at -inf and ending at +inf
    fpr: np.ndarray
    fnr: np.ndarray

    def points(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.fnr.tolist()))


def det_curve(scores: Iterable[ScoredUtterance]) -> DetCurve:
    scores = list(scores)
    s = np.array([u.score for u in scores], dtype=np.float64)
    pos = np.array([u.positive for u in scores], dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ClassMissingError(f"DET needs both classes (system={n_pos}, non-system={n_neg})")
    thresholds = np.concatenate([[-np.inf], np.unique(s), [np.inf]])
    pos_sorted = np.sort(s[pos])
    neg_sorted = np.sort(s[~pos])
    # count of scores strictly below each threshold
    fn = np.searchsorted(pos_sorted, thresholds, side="left")
    tn = np.searchsorted(neg_sorted, thresholds, side="left")
    return DetCurve(thresholds, (n_neg - tn) / n_neg, fn / n_pos)


def eer(curve: DetCurve) -> float:
    """Rate where FPR and FNR cross, linearly interpolated between neighbours."""
    d = curve.fpr - curve.fnr
    k = int(np.argmax(d <= 0))
    if d[k] == 0 or k == 0:
        return float(curve.fpr[k])
    u = d[k - 1] / (d[k - 1] - d[k])
    return float(curve.fpr[k - 1] + u * (curve.fpr[k] - curve.fpr[k - 1]))


def equal_error_rate(scores: Iterable[ScoredUtterance]) -> float:
    return eer(det_curve(scores))


# --- files -------------------------------------------------------------------

def _fmt(x: float) -> str:
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _probit(p: float) -> float:
    p = min(max(p, 1e-6), 1 - 1e-6)
    return NormalDist().inv_cdf(p)


def emit_reports(curves: Mapping[tuple[str, str], DetCurve], out_dir: str | Path) -> list[Path]:
    """Write det_<model>_<dataset>.csv, eer_summary.csv and det_plot.json.

    ``curves`` maps (model name, dataset name) to a curve.
    """
    if not curves:
        raise DataError("no curves to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = io.StringIO(newline="")
    sw = csv.writer(summary, lineterminator="\n")
    sw.writerow(["model", "dataset", "eer_percent"])
    series = []
    for (model, dataset), curve in sorted(curves.items()):
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "fnr"])
        for t, fp, fn in curve.points():
            w.writerow([_fmt(t), _fmt(fp), _fmt(fn)])
        path = out / f"det_{model}_{dataset}.csv"
        path.write_text(buf.getvalue())
        written.append(path)
        rate = eer(curve)
        sw.writerow([model, dataset, f"{100 * rate:.2f}"])
        series.append({
            "model": model, "dataset": dataset, "eer": rate,
            "threshold": [_fmt(t) for t in curve.thresholds],
            "fpr": curve.fpr.tolist(), "fnr": curve.fnr.tolist(),
            "fpr_probit": [_probit(p) for p in curve.fpr],
            "fnr_probit": [_probit(p) for p in curve.fnr],
        })
    path = out / "eer_summary.csv"
    path.write_text(summary.getvalue())
    written.append(path)
    path = out / "det_plot.json"
    path.write_text(json.dumps({"series": series}, indent=1, sort_keys=True) + "\n")
    written.append(path)
    return written


def write_scores(scores: Sequence[ScoredUtterance], path: str | Path) -> None:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "score"])
    for u in scores:
        w.writerow([u.id, u.label, repr(float(u.score))])
    Path(path).write_text(buf.getvalue())


def read_scores(path: str | Path) -> list[ScoredUtterance]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "label", "score"]:
            raise FormatError(f"{path}: expected header id,label,score")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(ScoredUtterance(row["id"], row["label"], float(row["score"])))
            except (ValueError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
        return out


# --- attention traces --------------------------------------------------------

def read_word_alignments(path: str | Path) -> list[tuple[str, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["word", "start_s", "end_s"]:
            raise FormatError(f"{path}: expected header word,start_s,end_s")
        return [(r["word"], float(r["start_s"]), float(r["end_s"])) for r in reader]


def attention_trace(model: Model, seq: FeatureSequence, word_alignments=None,
                    normalize: bool = True) -> AttentionTrace:
    if not has_attention(model.config.variant):
        raise UnsupportedVariantError(f"{model.config.variant} has no attention layer")
    _, trace = model.forward(seq, normalize=normalize)
    trace.words = list(word_alignments) if word_alignments else None
    return trace


def dump_attention(model: Model, seq: FeatureSequence, path: str | Path,
                   word_alignments=None, normalize: bool = True) -> AttentionTrace:
    """Write ``time_s,alpha`` rows (plus a ``word`` column when alignments are given)."""
    trace = attention_trace(model, seq, word_alignments, normalize)
    if abs(float(np.sum(trace.alpha)) - 1.0) > 1e-6:
        raise NumericError(f"attention weights sum to {np.sum(trace.alpha)}, not 1")
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    words = trace.words
    w.writerow(["time_s", "alpha", "word"] if words else ["time_s", "alpha"])
    for t, a in zip(trace.times, trace.alpha):
        row = [f"{t:.4f}", repr(float(a))]
        if words:
            row.append(next((wd for wd, s, e in words if s <= t < e), ""))
        w.writerow(row)
    Path(path).write_text(buf.getvalue())
    return trace
