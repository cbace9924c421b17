"""Recording preprocessing: resample to 1 kHz, 25-400 Hz band-pass, fixed 2.5 s cycles."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from . import CYCLE_SAMPLES, FS

log = logging.getLogger(__name__)

LABELS = ("normal", "abnormal")
MIN_BPM, MAX_BPM = 35.0, 159.0


class UnsegmentableRecording(ValueError):
    pass


@dataclass
class PcgRecording:
    samples: np.ndarray = field(repr=False)
    sample_rate: int
    label: str | None = None
    domain: str | None = None
    patient_id: str | None = None
    record_id: str = ""
    quality: bool | None = None

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.label is not None and self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")


@dataclass
class CycleSegment:
    samples: np.ndarray = field(repr=False)
    parent: str
    cycle_index: int

    def __post_init__(self):
        if len(self.samples) != CYCLE_SAMPLES:
            raise ValueError(f"cycle segment must hold {CYCLE_SAMPLES} samples")

    @property
    def key(self) -> str:
        return f"{self.parent}_c{self.cycle_index:03d}"


def resample_1k(x, fs_in: int) -> np.ndarray:
    """Polyphase resampling to 1000 Hz (the FIR stage doubles as anti-aliasing)."""
    x = np.asarray(x, dtype=np.float64)
    if fs_in < FS:
        raise ValueError(f"upsampling unsupported: fs_in={fs_in} < {FS}")
    if fs_in == FS:
        return x.copy()
    ratio = Fraction(FS, int(fs_in))
    y = sps.resample_poly(x, ratio.numerator, ratio.denominator)
    n_out = int(round(len(x) * FS / fs_in))
    if len(y) >= n_out:
        return y[:n_out]
    return np.pad(y, (0, n_out - len(y)))


_BANDPASS = sps.butter(4, [25, 400], btype="bandpass", fs=FS, output="sos")


def bandpass_25_400(x) -> np.ndarray:
    """Zero-phase 4th-order Butterworth band-pass, applied forward and backward."""
    x = np.asarray(x, dtype=np.float64)
    if not np.any(x):
        return np.zeros_like(x)
    return sps.sosfiltfilt(_BANDPASS, x)


def shannon_envelope(x, smooth_s: float = 0.05) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    peak = np.max(np.abs(x))
    if peak == 0:
        return np.zeros_like(x)
    xn = x / peak
    sq = xn**2
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(sq > 0, -sq * np.log(sq), 0.0)
    win = max(int(smooth_s * FS), 1)
    env = np.convolve(se, np.ones(win) / win, mode="same")
    return (env - env.mean()) / (env.std() + 1e-12)


def detect_onsets(x, fs: int = FS) -> list[int]:
    """S1 onsets from Shannon-energy envelope peaks.

    Peaks closer than one beat at the fastest plausible rate (159 bpm) are
    suppressed in favour of the taller one, which removes most S2 peaks.
    Each onset is taken where the envelope rises through half its peak
    height.
    """
    env = shannon_envelope(x)
    min_dist = int(60.0 / MAX_BPM * fs)
    peaks, _ = sps.find_peaks(env, distance=min_dist, height=0.5)
    if len(peaks) == 0:
        return []
    heights = env[peaks]
    keep = heights >= 0.4 * np.median(heights)
    onsets = []
    for p in peaks[keep]:
        half = env[p] / 2
        i = p
        while i > 0 and env[i - 1] > half and p - i < min_dist // 2:
            i -= 1
        onsets.append(int(i))
    return onsets


def slice_cycles(rec: PcgRecording, onsets=None) -> list[CycleSegment]:
    """Cut one zero-padded 2500-sample segment per cardiac cycle.

    A cycle runs from its onset to the next onset. The last cycle is given
    the median cycle length (or runs to the end if only one onset exists)
    and is dropped when less than half of it was recorded.
    """
    if rec.sample_rate != FS:
        raise ValueError("recording must be resampled to 1000 Hz first")
    x = np.asarray(rec.samples, dtype=np.float64)
    if onsets is None:
        onsets = detect_onsets(x)
    onsets = sorted(int(o) for o in onsets if 0 <= int(o) < len(x))
    if not onsets:
        raise UnsegmentableRecording(f"unsegmentable recording {rec.record_id!r}")
    bounds = list(onsets[1:])
    if len(onsets) > 1:
        period = int(np.median(np.diff(onsets)))
        last_end = onsets[-1] + period
        if len(x) - onsets[-1] < period / 2:
            onsets = onsets[:-1]
        else:
            bounds.append(min(last_end, len(x)))
    else:
        bounds.append(len(x))
    segments = []
    for i, (start, stop) in enumerate(zip(onsets, bounds)):
        cycle = x[start : min(stop, start + CYCLE_SAMPLES)]
        buf = np.zeros(CYCLE_SAMPLES)
        buf[: len(cycle)] = cycle
        segments.append(CycleSegment(buf, rec.record_id, i))
    return segments


def preprocess(rec: PcgRecording) -> PcgRecording:
    y = bandpass_25_400(resample_1k(rec.samples, rec.sample_rate))
    return PcgRecording(y, FS, rec.label, rec.domain, rec.patient_id, rec.record_id, rec.quality)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono PCM WAV into float samples in [-1, 1)."""
    fs, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0, int(fs)
    if data.dtype.kind == "f":
        return data.astype(np.float64), int(fs)
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2**31, int(fs)
    raise ValueError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, x, fs: int = FS) -> None:
    pcm = np.clip(np.round(np.asarray(x) * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(str(path), fs, pcm)


def read_onsets(path) -> list[int]:
    lines = Path(path).read_text().split()
    return [int(v) for v in lines]


def write_onsets(path, onsets) -> None:
    Path(path).write_text("".join(f"{int(o)}\n" for o in onsets))
