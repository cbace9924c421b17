"""Acoustic degradation model: clean PCG synthesis, additive noise, FIR stethoscope channels.

The observed signal is ``x = (s + n) * h``: noise is added to the clean heart
sound first and the sum is then convolved with the stethoscope's impulse
response.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from . import FS

RESPONSE_GRID = 8192
MAX_CHANNEL_TAPS = 49  # shorter than the 50-sample analysis window


def frequency_response_peak(h, n_fft: int = RESPONSE_GRID) -> float:
    return float(np.abs(np.fft.rfft(np.asarray(h, dtype=np.float64), n=n_fft)).max())


@dataclass(frozen=True)
class ChannelModel:
    impulse_response: np.ndarray = field(repr=False)
    label: str = "identity"

    def __post_init__(self):
        h = np.asarray(self.impulse_response, dtype=np.float64)
        if h.ndim != 1 or h.size < 1:
            raise ValueError("impulse response must be a non-empty 1-D array")
        if not np.any(h):
            raise ValueError("impulse response is all zeros")
        h = h / frequency_response_peak(h)
        h.setflags(write=False)
        object.__setattr__(self, "impulse_response", h)

    def __len__(self):
        return self.impulse_response.size


def _resonant_taps() -> np.ndarray:
    # damped 120 Hz resonance plus direct path, roughly a diaphragm mode
    t = np.arange(24) / FS
    return np.r_[1.0, np.zeros(23)] + 0.8 * np.exp(-t / 0.006) * np.cos(2 * np.pi * 120 * t)


CHANNEL_PRESETS = {
    "identity": lambda: np.array([1.0]),
    # first-order smoothing, ~-10 dB at 400 Hz relative to DC
    "lowpass_tilt": lambda: np.array([0.45, 0.35, 0.2]),
    "resonant": _resonant_taps,
}


def make_channel(kind: str, seed: int = 0, length: int = 8) -> ChannelModel:
    """Build a peak-normalised stethoscope channel.

    ``kind`` is one of the fixed presets or ``"random_fir"``; the random
    variant draws exponentially decaying Gaussian taps from ``seed``.
    """
    if kind in CHANNEL_PRESETS:
        return ChannelModel(CHANNEL_PRESETS[kind](), kind)
    if kind == "random_fir":
        if not 1 <= length <= MAX_CHANNEL_TAPS:
            raise ValueError(f"random_fir length must be in [1, {MAX_CHANNEL_TAPS}]")
        rng = np.random.default_rng(seed)
        taps = rng.standard_normal(length) * np.exp(-np.arange(length) / max(length / 3, 1.0))
        taps[0] = abs(taps[0]) + 1.0
        return ChannelModel(taps, f"random_fir{seed}")
    raise ValueError(f"unknown channel kind {kind!r}")


def parse_channel(name: str) -> ChannelModel:
    """Parse a channel name as written on the command line (``random_fir:SEED[:L]``)."""
    if name.startswith("random_fir"):
        parts = name.split(":")
        seed = int(parts[1]) if len(parts) > 1 else 0
        length = int(parts[2]) if len(parts) > 2 else 8
        return make_channel("random_fir", seed=seed, length=length)
    return make_channel(name)


def apply_channel(x, ch: ChannelModel, mode: str = "linear") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = ch.impulse_response
    if len(x) < len(h):
        raise ValueError("signal shorter than impulse response")
    if mode == "linear":
        return np.convolve(x, h)[: len(x)]
    if mode == "circular":
        n = len(x)
        return np.fft.irfft(np.fft.rfft(x) * np.fft.rfft(h, n=n), n=n)
    raise ValueError(f"unknown convolution mode {mode!r}")


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float
    kind: str = "white"
    band: tuple[float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("white", "bandlimited"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "bandlimited":
            if self.band is None:
                raise ValueError("bandlimited noise needs a band")
            lo, hi = self.band
            if not 0 < lo < hi <= FS / 2:
                raise ValueError("band must satisfy 0 < lo < hi <= Nyquist")


def make_noise(n: int, spec: NoiseSpec, fs: float = FS) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(n)
    if spec.kind == "bandlimited":
        lo, hi = spec.band
        if hi >= fs / 2:
            sos = sps.butter(4, lo, btype="highpass", fs=fs, output="sos")
        else:
            sos = sps.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
        noise = sps.sosfiltfilt(sos, noise)
    return noise


def mix_at_snr(s, noise: NoiseSpec, fs: float = FS) -> np.ndarray:
    """Return ``s + n`` with ``n`` scaled so the full-segment SNR equals ``noise.snr_db``."""
    s = np.asarray(s, dtype=np.float64)
    if len(s) == 0:
        raise ValueError("empty signal")
    if math.isinf(noise.snr_db) and noise.snr_db > 0:
        return s.copy()
    p_s = np.mean(s**2)
    if p_s == 0:
        raise ValueError("undefined SNR for silent signal")
    n = make_noise(len(s), noise, fs)
    p_n = np.mean(n**2)
    n *= math.sqrt(p_s / (p_n * 10 ** (noise.snr_db / 10)))
    return s + n


@dataclass(frozen=True)
class SyntheticPcgSpec:
    heart_rate_bpm: float = 72.0
    label: str = "normal"
    murmur_band: tuple[float, float] = (150.0, 350.0)
    murmur_level: float = 0.3
    duration_s: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 35 <= self.heart_rate_bpm <= 159:
            raise ValueError("heart_rate_bpm must lie in [35, 159]")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.label not in ("normal", "abnormal"):
            raise ValueError("label must be 'normal' or 'abnormal'")
        lo, hi = self.murmur_band
        if not 0 < lo < hi < FS / 2:
            raise ValueError("murmur_band must lie inside (0, 500) Hz")

    @property
    def period_samples(self) -> float:
        return 60.0 / self.heart_rate_bpm * FS

    @property
    def systole_samples(self) -> int:
        return int(round(min(0.30, 0.4 * 60.0 / self.heart_rate_bpm) * FS))

    def s1_onsets(self) -> list[int]:
        n = int(round(self.duration_s * FS))
        return [int(round(k * self.period_samples)) for k in range(int(n / self.period_samples) + 1)
                if round(k * self.period_samples) < n]


S1_LEN = 100
S2_LEN = 80


def _burst(rng, length: int, f_lo: float, f_hi: float, amp: float) -> np.ndarray:
    t = np.arange(length) / FS
    f0 = rng.uniform(f_lo, f_hi)
    return amp * np.hanning(length) * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))


def synth_pcg(spec: SyntheticPcgSpec) -> np.ndarray:
    """Synthesise a 1 kHz heart-sound waveform.

    S1 and S2 are Hann-windowed low-frequency tone bursts. For the abnormal
    class a band-limited systolic murmur fills the gap between S1 and S2.
    Random draws do not depend on the class, so with ``murmur_level == 0``
    both classes produce the same waveform. Peak amplitude is 0.9.
    """
    n = int(round(spec.duration_s * FS))
    rng = np.random.default_rng(spec.seed)
    x = np.zeros(n + S1_LEN + spec.systole_samples + S2_LEN)
    lo, hi = spec.murmur_band
    sos = sps.butter(4, [lo, hi], btype="bandpass", fs=FS, output="sos")
    murmur_gain = spec.murmur_level if spec.label == "abnormal" else 0.0
    mlen = max(spec.systole_samples - S1_LEN + 40, 1)
    for onset in spec.s1_onsets():
        x[onset : onset + S1_LEN] += _burst(rng, S1_LEN, 40, 60, rng.uniform(0.9, 1.0))
        s2 = onset + spec.systole_samples
        x[s2 : s2 + S2_LEN] += _burst(rng, S2_LEN, 60, 90, rng.uniform(0.5, 0.65))
        m = sps.sosfilt(sos, rng.standard_normal(mlen + 200))[200:]
        m = m / (np.max(np.abs(m)) + 1e-12) * np.hanning(mlen) ** 0.5
        start = onset + S1_LEN - 20
        x[start : start + mlen] += murmur_gain * m
    x = x[:n]
    peak = np.max(np.abs(x))
    return x * (0.9 / peak) if peak > 0 else x
