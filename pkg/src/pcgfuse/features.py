"""Filterbank feature family (Fbank, LogFbank, MFCC variants), fusion and per-cycle normalisation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import FS
from .dsp import (
    FrameSpec,
    apply_filterbank,
    build_mel_filterbank,
    dct2_orthonormal,
    delta_features,
    frame_signal,
    log_energies,
    power_spectrum,
)

NORM_EPS = 1e-8


class FeatureKind(str, enum.Enum):
    FBANK = "Fbank"
    LOGFBANK = "LogFbank"
    MFCC26 = "MFCC26"
    MFCC13 = "MFCC13"
    MFCC13_D = "MFCC13_D"
    MFCC13_DD = "MFCC13_DD"

    @property
    def dim(self) -> int:
        return _DIMS[self]


_DIMS = {
    FeatureKind.FBANK: 26,
    FeatureKind.LOGFBANK: 26,
    FeatureKind.MFCC26: 26,
    FeatureKind.MFCC13: 13,
    FeatureKind.MFCC13_D: 26,
    FeatureKind.MFCC13_DD: 39,
}

_ALIASES = {
    "fbank": FeatureKind.FBANK,
    "logfbank": FeatureKind.LOGFBANK,
    "log-fbank": FeatureKind.LOGFBANK,
    "mfcc26": FeatureKind.MFCC26,
    "mfcc-26": FeatureKind.MFCC26,
    "mfcc13": FeatureKind.MFCC13,
    "mfcc-13": FeatureKind.MFCC13,
    "mfcc13_d": FeatureKind.MFCC13_D,
    "mfcc13_dd": FeatureKind.MFCC13_DD,
}


def parse_kinds(text) -> tuple[FeatureKind, ...]:
    """Parse ``"Fbank&MFCC13"`` (also ``+`` or ``,`` separated) into an ordered kind tuple."""
    if isinstance(text, FeatureKind):
        return (text,)
    if not isinstance(text, str):
        return tuple(k if isinstance(k, FeatureKind) else parse_kinds(k)[0] for k in text)
    parts = [p.strip() for p in text.replace("+", "&").replace(",", "&").split("&") if p.strip()]
    if not parts:
        raise ValueError("empty feature list")
    try:
        return tuple(_ALIASES[p.lower()] for p in parts)
    except KeyError as err:
        raise ValueError(f"unknown feature kind {err.args[0]!r}") from None


def kind_tag(kinds) -> str:
    return "&".join(k.value for k in parse_kinds(kinds))


def fused_dim(kinds) -> int:
    return sum(k.dim for k in parse_kinds(kinds))


@dataclass(frozen=True)
class FeatureConfig:
    frame: FrameSpec = FrameSpec()
    num_filters: int = 26
    f_low: float = 0.0
    f_high: float = FS / 2
    log_floor: float = 1e-10
    delta_width: int = 2
    per_row_norm: bool = False
    normalize_parts: bool = False


@dataclass
class FeatureMatrix:
    values: np.ndarray = field(repr=False)
    kind: str
    segment: str = ""

    @property
    def shape(self):
        return self.values.shape


@lru_cache(maxsize=16)
def _filterbank(num_filters, dft_size, f_low, f_high):
    return build_mel_filterbank(num_filters, FS, dft_size, f_low, f_high)


def _stages(samples, cfg: FeatureConfig):
    fb = _filterbank(cfg.num_filters, cfg.frame.dft_size, cfg.f_low, cfg.f_high)
    frames = frame_signal(samples, cfg.frame)
    fbank = apply_filterbank(power_spectrum(frames, cfg.frame.dft_size), fb).T  # (M, T)
    return fbank


def extract(samples, kind, cfg: FeatureConfig = FeatureConfig(), segment: str = "") -> FeatureMatrix:
    """Unnormalised d x T matrix for a single base feature kind."""
    kinds = parse_kinds(kind)
    if len(kinds) != 1:
        raise ValueError("extract takes a single base kind; use extract_fused for fusion lists")
    kind = kinds[0]
    return FeatureMatrix(_extract_many(samples, (kind,), cfg)[0], kind.value, segment)


def _extract_many(samples, kinds, cfg):
    fbank = _stages(samples, cfg)
    out = {}
    log_fb = mfcc13 = None
    for kind in kinds:
        if kind in out:
            continue
        if kind is FeatureKind.FBANK:
            out[kind] = fbank
            continue
        if log_fb is None:
            log_fb = log_energies(fbank, cfg.log_floor)
        if kind is FeatureKind.LOGFBANK:
            out[kind] = log_fb
        elif kind is FeatureKind.MFCC26:
            out[kind] = dct2_orthonormal(log_fb, keep=cfg.num_filters, axis=0)
        else:
            if mfcc13 is None:
                mfcc13 = dct2_orthonormal(log_fb, keep=13, axis=0)
            if kind is FeatureKind.MFCC13:
                out[kind] = mfcc13
            else:
                d1 = delta_features(mfcc13, cfg.delta_width)
                if kind is FeatureKind.MFCC13_D:
                    out[kind] = np.vstack([mfcc13, d1])
                else:
                    out[kind] = np.vstack([mfcc13, d1, delta_features(d1, cfg.delta_width)])
    return [out[k] for k in kinds]


def fuse(parts) -> FeatureMatrix:
    """Stack feature matrices vertically in the given order."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to fuse")
    cols = {p.values.shape[1] for p in parts}
    if len(cols) != 1:
        raise ValueError(f"column counts differ: {sorted(cols)}")
    segs = {p.segment for p in parts}
    if len(segs) != 1:
        raise ValueError(f"parts come from different segments: {sorted(segs)}")
    if len(parts) == 1:
        return FeatureMatrix(parts[0].values.copy(), parts[0].kind, parts[0].segment)
    return FeatureMatrix(
        np.vstack([p.values for p in parts]), "&".join(p.kind for p in parts), parts[0].segment
    )


def normalize_cycle(feat: FeatureMatrix | np.ndarray, per_row: bool = False):
    """Subtract the cycle mean and divide by its standard deviation.

    Statistics cover the whole matrix unless ``per_row`` is set. Constant
    input maps to zeros.
    """
    values = feat.values if isinstance(feat, FeatureMatrix) else np.asarray(feat, dtype=np.float64)
    axis = 1 if per_row else None
    mu = values.mean(axis=axis, keepdims=per_row)
    sd = values.std(axis=axis, keepdims=per_row)
    out = np.where(sd > NORM_EPS, (values - mu) / np.maximum(sd, NORM_EPS), 0.0)
    if isinstance(feat, FeatureMatrix):
        return FeatureMatrix(out, feat.kind, feat.segment)
    return out


def extract_fused(samples, kinds, cfg: FeatureConfig = FeatureConfig(), normalize: bool = True) -> np.ndarray:
    """Extract, fuse and (optionally) normalise: the model-input matrix for one segment."""
    kinds = parse_kinds(kinds)
    mats = _extract_many(samples, kinds, cfg)
    if normalize and cfg.normalize_parts:
        mats = [normalize_cycle(m, cfg.per_row_norm) for m in mats]
        return np.vstack(mats)
    fused = np.vstack(mats) if len(mats) > 1 else mats[0]
    return normalize_cycle(fused, cfg.per_row_norm) if normalize else fused


def extract_batch(segments, kinds, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Normalised model inputs for a stack of segments, shape (B, 1, d, T)."""
    return np.stack([extract_fused(s, kinds, cfg)[None] for s in segments])
