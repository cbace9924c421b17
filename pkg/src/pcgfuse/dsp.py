"""Short-time spectral analysis primitives.

Framing, windowed power spectra, mel filterbank, natural-log energies,
orthonormal DCT-II and regression deltas. Everything here is a pure
function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft

WINDOWS = ("rectangular", "hamming", "hann")


@dataclass(frozen=True)
class FrameSpec:
    """Frame length, hop and window for short-time analysis (all in samples)."""

    window_len: int = 50
    hop: int = 10
    window_fn: str = "hamming"
    dft_size: int = 64

    def __post_init__(self):
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.dft_size < self.window_len:
            raise ValueError("dft_size must be >= window_len")
        if self.window_fn not in WINDOWS:
            raise ValueError(f"unknown window_fn {self.window_fn!r}, expected one of {WINDOWS}")

    def num_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop + 1

    @property
    def num_bins(self) -> int:
        return self.dft_size // 2 + 1


@lru_cache(maxsize=32)
def _window(name: str, n: int) -> np.ndarray:
    if name == "rectangular":
        w = np.ones(n)
    elif name == "hamming":
        w = np.hamming(n)
    else:
        w = np.hanning(n)
    w.setflags(write=False)
    return w


def frame_signal(x, spec: FrameSpec) -> np.ndarray:
    """Split ``x`` into overlapping windowed frames, shape (n_frames, window_len)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D waveform")
    if len(x) < spec.window_len:
        raise ValueError("signal too short")
    frames = sliding_window_view(x, spec.window_len)[:: spec.hop]
    return frames * _window(spec.window_fn, spec.window_len)


def power_spectrum(frames, dft_size: int) -> np.ndarray:
    """|DFT|^2 of each frame (zero-padded to ``dft_size``), bins 0..dft_size/2."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] > dft_size:
        raise ValueError(f"frame length {frames.shape[-1]} exceeds dft_size {dft_size}")
    spec = np.fft.rfft(frames, n=dft_size, axis=-1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray = field(repr=False)  # (M, dft_size//2 + 1)
    sample_rate: float
    f_low: float
    f_high: float
    dft_size: int

    @property
    def num_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def centers_hz(self) -> np.ndarray:
        pts = np.linspace(hz_to_mel(self.f_low), hz_to_mel(self.f_high), self.num_filters + 2)
        return mel_to_hz(pts[1:-1])


def build_mel_filterbank(
    num_filters: int, sample_rate: float, dft_size: int, f_low: float = 0.0, f_high: float | None = None
) -> MelFilterbank:
    """Triangular filters with centres equally spaced on the HTK mel scale.

    Filter responses are evaluated at the exact bin frequencies, so every
    filter covers at least one bin as long as the mel spacing is wider than
    half a bin.
    """
    if f_high is None:
        f_high = sample_rate / 2
    if num_filters < 1:
        raise ValueError("num_filters must be >= 1")
    if not 0 <= f_low < f_high <= sample_rate / 2:
        raise ValueError("require 0 <= f_low < f_high <= sample_rate/2")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_low), hz_to_mel(f_high), num_filters + 2))
    bins = np.arange(dft_size // 2 + 1) * sample_rate / dft_size
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (centre - lower)
    falling = (upper - bins[None, :]) / (upper - centre)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"{num_filters} filters too many for dft_size {dft_size}: filters {empty.tolist()} are empty"
        )
    weights.setflags(write=False)
    return MelFilterbank(weights, float(sample_rate), float(f_low), float(f_high), int(dft_size))


def apply_filterbank(power, fb: MelFilterbank) -> np.ndarray:
    """Per-filter mean of weighted in-band power.

    ``power`` may be a single spectrum or a stack (..., n_bins); the result
    has the filter axis last.
    """
    power = np.asarray(power, dtype=np.float64)
    if power.shape[-1] != fb.weights.shape[1]:
        raise ValueError(f"spectrum has {power.shape[-1]} bins, filterbank expects {fb.weights.shape[1]}")
    in_band = np.count_nonzero(fb.weights, axis=1)
    return (power @ fb.weights.T) / in_band


def log_energies(energies, floor: float = 1e-10) -> np.ndarray:
    if floor <= 0:
        raise ValueError("floor must be positive")
    return np.log(np.maximum(np.asarray(energies, dtype=np.float64), floor))


def dct2_orthonormal(v, keep: int | None = None, axis: int = -1) -> np.ndarray:
    """Orthonormal DCT-II along ``axis``, keeping the leading ``keep`` coefficients."""
    v = np.asarray(v, dtype=np.float64)
    m = v.shape[axis]
    if keep is None:
        keep = m
    if not 1 <= keep <= m:
        raise ValueError(f"keep must be in [1, {m}], got {keep}")
    out = sp_fft.dct(v, type=2, norm="ortho", axis=axis)
    return np.take(out, np.arange(keep), axis=axis)


def idct2_orthonormal(c, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`dct2_orthonormal` with all coefficients kept."""
    return sp_fft.idct(np.asarray(c, dtype=np.float64), type=2, norm="ortho", axis=axis)


def delta_features(feats, half_width: int = 2) -> np.ndarray:
    """Regression deltas along the time (column) axis of a d x T matrix, edges replicated."""
    feats = np.asarray(feats, dtype=np.float64)
    t = feats.shape[1]
    if half_width < 1:
        raise ValueError("half_width must be >= 1")
    if t <= 2 * half_width:
        raise ValueError(f"need more than {2 * half_width} frames for half_width={half_width}, got {t}")
    padded = np.pad(feats, ((0, 0), (half_width, half_width)), mode="edge")
    num = np.zeros_like(feats)
    for k in range(1, half_width + 1):
        num += k * (padded[:, half_width + k : half_width + k + t] - padded[:, half_width - k : half_width - k + t])
    return num / (2 * sum(k * k for k in range(1, half_width + 1)))
