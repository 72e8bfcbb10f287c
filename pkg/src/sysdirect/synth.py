"""Synthetic two-class corpus standing in for recorded device-directed speech.

Both classes are amplitude-modulated harmonic complexes on top of white
background noise.  They differ in modulation rate (fast for the
system-directed class, slow for the other) and optionally in how much
band noise is mixed into the complex.  With ``burst_s`` set, the class
signal occupies only a window of that length at a random position; the
rest of the utterance is background, and a ``<name>.words.csv`` sidecar
records the window as the word ``burst``.

This is a proxy task for exercising the models end to end.  It does not
reproduce any real corpus.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .features import AudioClip, encode_wav, read_wav

SPLITS = ("train", "val", "test")
LABELS = ("system", "non-system")
MANIFEST_HEADER = ["path", "label", "split", "duration_s"]


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    duration_min: float = 0.6
    duration_max: float = 1.2
    sample_rate: int = 16000
    system_mod_min: float = 8.0
    system_mod_max: float = 12.0
    system_noise_weight: float = 0.0
    nonsystem_mod_min: float = 1.0
    nonsystem_mod_max: float = 3.0
    nonsystem_noise_weight: float = 0.6
    mod_depth: float = 0.9
    f0_min: float = 120.0
    f0_max: float = 260.0
    snr_db: float = 40.0
    burst_s: float = 0.0  # 0 = evidence spans the whole utterance
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("utterance counts must be non-negative")
        if self.duration_min < 0.2 or self.duration_max < self.duration_min:
            raise ConfigError("durations must satisfy 0.2 <= duration_min <= duration_max")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.burst_s < 0 or self.burst_s > self.duration_min:
            raise ConfigError("burst_s must lie in [0, duration_min]")
        if self.system_mod_min > self.system_mod_max or self.nonsystem_mod_min > self.nonsystem_mod_max:
            raise ConfigError("modulation ranges must be ordered (min <= max)")

    def count(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


PRESETS = {
    "easy": SynthSpec(),
    "hard": SynthSpec(
        n_train=300, duration_min=2.0, duration_max=3.0, burst_s=0.5,
        system_mod_min=6.0, system_mod_max=12.0, nonsystem_mod_min=2.0, nonsystem_mod_max=7.0,
        system_noise_weight=0.3, nonsystem_noise_weight=0.3, snr_db=0.0,
    ),
}


def load_spec(source: str | Path) -> SynthSpec:
    """A preset name, or a key=value file (optionally under a ``[synth]`` section).

    A ``preset = <name>`` key starts from that preset before applying overrides.
    """
    if str(source) in PRESETS:
        return PRESETS[str(source)]
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"no preset or spec file named {source!r}")
    text = path.read_text()
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text if text.lstrip().startswith("[") else "[synth]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    section = dict(parser["synth"]) if parser.has_section("synth") else {}
    base = PRESETS.get(section.pop("preset", "easy"))
    if base is None:
        raise ConfigError(f"{path}: unknown preset")
    types = {f.name: f.type for f in dataclasses.fields(SynthSpec)}
    values = {}
    for key, raw in section.items():
        if key not in types:
            raise ConfigError(f"{path}: unknown key {key!r}")
        cast = int if types[key] in ("int", int) else float
        try:
            values[key] = cast(raw)
        except ValueError:
            raise ConfigError(f"{path}: {key} = {raw!r} is not a number") from None
    return dataclasses.replace(base, **values)


def _complex_tone(rng, t, f0, sample_rate):
    out = np.zeros_like(t)
    for k in range(1, 9):
        if k * f0 >= sample_rate / 2:
            break
        out += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
    return out / np.sqrt(np.mean(out ** 2))


def _band_noise(rng, n, sample_rate, lo=300.0, hi=3000.0):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(f < lo) | (f > hi)] = 0
    out = np.fft.irfft(spec, n)
    return out / (np.sqrt(np.mean(out ** 2)) + 1e-12)


def synthesize(spec: SynthSpec, label: str, rng: np.random.Generator) -> tuple[np.ndarray, tuple[float, float]]:
    """One utterance and its evidence interval (start_s, end_s)."""
    sr = spec.sample_rate
    duration = rng.uniform(spec.duration_min, spec.duration_max)
    n = int(round(duration * sr))
    if spec.burst_s > 0:
        m = int(round(spec.burst_s * sr))
        start = int(rng.integers(0, n - m + 1))
    else:
        m, start = n, 0
    if label == "system":
        lo, hi, noise_w = spec.system_mod_min, spec.system_mod_max, spec.system_noise_weight
    else:
        lo, hi, noise_w = spec.nonsystem_mod_min, spec.nonsystem_mod_max, spec.nonsystem_noise_weight
    t = np.arange(m) / sr
    carrier = (1 - noise_w) * _complex_tone(rng, t, rng.uniform(spec.f0_min, spec.f0_max), sr)
    if noise_w > 0:
        carrier += noise_w * _band_noise(rng, m, sr)
    rate = rng.uniform(lo, hi)
    envelope = 1 + spec.mod_depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    signal = carrier * envelope
    signal /= np.sqrt(np.mean(signal ** 2))
    noise = rng.standard_normal(n) * 10 ** (-spec.snr_db / 20)
    audio = noise
    audio[start:start + m] += signal
    audio *= 0.9 / np.max(np.abs(audio))
    return audio, (start / sr, (start + m) / sr)


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: str
    split: str
    duration_s: float


@dataclass
class Manifest:
    root: Path
    rows: list[ManifestRow]

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def wav_path(self, row: ManifestRow) -> Path:
        return self.root / row.path

    def words_path(self, row: ManifestRow) -> Path | None:
        p = (self.root / row.path).with_suffix(".words.csv")
        return p if p.exists() else None

    def clips(self, split: str | None = None) -> Iterator[tuple[AudioClip, str, str]]:
        for row in self.rows if split is None else self.split(split):
            clip = read_wav(self.wav_path(row))
            clip.id = utterance_id(row)
            yield clip, row.label, row.split


def utterance_id(row: ManifestRow) -> str:
    return Path(row.path).with_suffix("").as_posix()


def _utterance_rng(seed: int, split: str, label: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, SPLITS.index(split), LABELS.index(label), index]))


def generate(spec: SynthSpec, out_dir: str | Path) -> Manifest:
    """Write ``<split>/<label>_<k>.wav`` files, word sidecars (burst mode) and ``manifest.csv``."""
    out = Path(out_dir)
    rows = []
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)
        for label in LABELS:
            for k in range(spec.count(split)):
                audio, (s0, s1) = synthesize(spec, label, _utterance_rng(spec.seed, split, label, k))
                rel = f"{split}/{label}_{k:04d}.wav"
                (out / rel).write_bytes(encode_wav(audio, spec.sample_rate))
                if spec.burst_s > 0:
                    (out / rel).with_suffix(".words.csv").write_text(
                        f"word,start_s,end_s\nburst,{s0:.4f},{s1:.4f}\n")
                rows.append(ManifestRow(rel, label, split, round(audio.size / spec.sample_rate, 4)))
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in rows:
        w.writerow([r.path, r.label, r.split, f"{r.duration_s:.4f}"])
    (out / "manifest.csv").write_text(buf.getvalue())
    return Manifest(out, rows)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    root = path.parent
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
            rel, label, split, dur = rec
            if label not in LABELS:
                raise FormatError(f"{path}:{lineno}: bad label {label!r}")
            if split not in SPLITS:
                raise FormatError(f"{path}:{lineno}: bad split {split!r}")
            try:
                duration = float(dur)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad duration {dur!r}") from None
            if not (root / rel).exists():
                raise DataError(f"{path}:{lineno}: audio file {root / rel} is missing")
            rows.append(ManifestRow(rel, label, split, duration))
    return Manifest(root, rows)
