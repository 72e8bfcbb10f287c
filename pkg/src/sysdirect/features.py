"""WAV decoding, log-Mel filterbank extraction and per-dimension normalization.

Conventions (the usual ones, since nothing more specific is prescribed):
Hamming window, FFT size = next power of two >= frame length, power
spectrum, 45 HTK-mel triangular filters from 0 Hz to Nyquist, natural log
with an additive floor.  No resampling: any positive sample rate is
accepted, but a corpus is expected to use one rate (16 kHz is the tested
reference).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyAudioError, EmptyCorpusError, FormatError, TooShortError, UnsupportedCodecError,
)

N_MELS = 45
FRAME_LENGTH_S = 0.025
FRAME_SHIFT_S = 0.010
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-6

_PCM = 0x0001
_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise EmptyAudioError(f"{self.id or 'clip'}: no samples")
        if not np.all(np.isfinite(self.samples)):
            raise FormatError(f"{self.id or 'clip'}: non-finite samples")
        if self.sample_rate <= 0:
            raise FormatError(f"{self.id or 'clip'}: sample rate must be positive")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, 45)
    frame_shift_s: float = FRAME_SHIFT_S
    frame_length_s: float = FRAME_LENGTH_S
    id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.dtype.kind != "f":
            self.frames = self.frames.astype(np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS or self.frames.shape[0] < 1:
            raise FormatError(f"feature sequence must be T x {N_MELS} with T >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise FormatError(f"{self.id or 'features'}: non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class NormalizationStats:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_MELS))
    std: np.ndarray = field(default_factory=lambda: np.ones(N_MELS))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (N_MELS,) or self.std.shape != (N_MELS,):
            raise FormatError("normalization stats must be 45-vectors")
        if not np.all(self.std > 0):
            raise FormatError("normalization std must be positive")


# --- WAV ---------------------------------------------------------------------

def decode_wav(data: bytes, id: str = "") -> AudioClip:
    """Decode a RIFF/WAVE byte string (16-bit PCM or 32-bit float).

    Multi-channel files keep only the first channel.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE container")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError("truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _EXTENSIBLE:
                if len(body) < 26:
                    raise FormatError("truncated extensible fmt chunk")
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise FormatError("missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0:
        raise FormatError(f"bad header: channels={channels}, rate={rate}")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"format tag {tag:#x} with {bits} bits")
    n = len(payload) // (dtype.itemsize * channels)
    if n == 0:
        raise EmptyAudioError("zero-length data chunk")
    raw = np.frombuffer(payload[:n * dtype.itemsize * channels], dtype=dtype).reshape(n, channels)
    samples = raw[:, 0].astype(np.float64) * scale
    if tag == _FLOAT:
        samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples, rate, id)


def encode_wav(samples: np.ndarray, sample_rate: int) -> bytes:
    """16-bit mono PCM, clipping to [-1, 1) before quantization."""
    q = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _PCM, 1, sample_rate, sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    return header + payload


def read_wav(path: str | Path) -> AudioClip:
    path = Path(path)
    return decode_wav(path.read_bytes(), id=path.stem)


# --- log-Mel -----------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_params(sample_rate: int) -> tuple[int, int, int]:
    """(frame length, frame shift, FFT size) in samples."""
    length = int(round(FRAME_LENGTH_S * sample_rate))
    shift = int(round(FRAME_SHIFT_S * sample_rate))
    nfft = 1 << max(0, (length - 1).bit_length())
    return length, shift, nfft


def n_frames(n_samples: int, sample_rate: int) -> int:
    length, shift, _ = frame_params(sample_rate)
    return 1 + (n_samples - length) // shift if n_samples >= length else 0


def mel_edges_hz(sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    """n_mels + 2 filter edge frequencies; filter k spans edges[k]..edges[k+2]."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))


def mel_filterbank(sample_rate: int, nfft: int, n_mels: int = N_MELS) -> np.ndarray:
    """(n_mels, nfft//2 + 1) triangular responses evaluated at the FFT bin frequencies."""
    edges = mel_edges_hz(sample_rate, n_mels)
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs - lo) / (mid - lo)
    fall = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rise, fall))


def extract_log_mel(clip: AudioClip) -> FeatureSequence:
    """Frame the clip (25 ms / 10 ms) and return log mel energies.

    The result is stored as float32 so the feature cache round-trips exactly.
    """
    length, shift, nfft = frame_params(clip.sample_rate)
    n = clip.samples.size
    if n < length:
        raise TooShortError(f"{clip.id or 'clip'}: {n} samples is shorter than one {length}-sample frame")
    t = 1 + (n - length) // shift
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, length)[::shift][:t]
    spec = np.fft.rfft(frames * np.hamming(length), n=nfft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    energies = power @ mel_filterbank(clip.sample_rate, nfft).T
    logmel = np.log(energies + LOG_FLOOR).astype(np.float32)
    return FeatureSequence(logmel, shift / clip.sample_rate, length / clip.sample_rate, clip.id)


# --- normalization -----------------------------------------------------------

def fit_normalization(corpus: Iterable[FeatureSequence]) -> NormalizationStats:
    """Per-coefficient mean and (population) std pooled over every frame."""
    seqs = list(corpus)
    if not seqs:
        raise EmptyCorpusError("cannot fit normalization on an empty corpus")
    total = sum(s.n_frames for s in seqs)
    if total < 2:
        raise EmptyCorpusError("normalization needs at least 2 frames in total")
    mean = sum(s.frames.sum(axis=0, dtype=np.float64) for s in seqs) / total
    var = sum(((s.frames - mean) ** 2).sum(axis=0) for s in seqs) / total
    return NormalizationStats(mean, np.maximum(np.sqrt(var), STD_FLOOR))


def apply_normalization(seq: FeatureSequence, stats: NormalizationStats) -> FeatureSequence:
    out = (seq.frames.astype(np.float64) - stats.mean) / stats.std
    return FeatureSequence(out, seq.frame_shift_s, seq.frame_length_s, seq.id)


# --- feature cache ("DSFB" records) ------------------------------------------

CACHE_MAGIC = b"DSFB"
CACHE_VERSION = 1


def write_feature_cache(seq: FeatureSequence, path: str | Path) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    header = CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, frames.shape[0], frames.shape[1])
    Path(path).write_bytes(header + frames.tobytes())


def read_feature_cache(path: str | Path, id: str | None = None) -> FeatureSequence:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a feature cache record")
    version, t, dims = struct.unpack_from("<III", data, 4)
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    if dims != N_MELS or len(data) != 16 + 4 * t * dims:
        raise FormatError(f"{path}: inconsistent record size")
    frames = np.frombuffer(data, dtype="<f4", offset=16).reshape(t, dims).astype(np.float32)
    return FeatureSequence(frames, id=path.stem if id is None else id)


def mel_centers_hz(sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    return mel_edges_hz(sample_rate, n_mels)[1:-1]


def extract_many(clips: Sequence[AudioClip], workers: int = 1) -> list[FeatureSequence]:
    """Feature extraction for many clips; order preserved regardless of ``workers``."""
    if workers <= 1 or len(clips) < 2:
        return [extract_log_mel(c) for c in clips]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(extract_log_mel, clips))
