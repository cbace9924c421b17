"""Glue between modules: recording -> segments -> features -> recording-level decision."""

from __future__ import annotations

import numpy as np

from .evaluation import RecordingResult, majority_vote
from .features import FeatureConfig, extract_fused
from .model import predict_proba
from .preprocess import CycleSegment, PcgRecording, preprocess, slice_cycles


def segment_recording(samples, sample_rate: int, onsets=None, record_id: str = "") -> list[CycleSegment]:
    rec = preprocess(PcgRecording(np.asarray(samples, dtype=np.float64), sample_rate, record_id=record_id))
    if onsets is not None and sample_rate != rec.sample_rate:
        onsets = [int(round(o * rec.sample_rate / sample_rate)) for o in onsets]
    return slice_cycles(rec, onsets)


def features_for(segments, kinds, feat_cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Normalised model inputs (N, 1, d, T) for a list of segments or raw cycles."""
    return np.stack([extract_fused(getattr(s, "samples", s), kinds, feat_cfg)[None] for s in segments])


def predict_recording(params, feats) -> tuple[int, float, list[int]]:
    """Majority-voted class, mean p(abnormal) over cycles, and the per-cycle classes."""
    probs = predict_proba(params, feats)
    seg_preds = [int(v) for v in probs.argmax(axis=1)]
    return majority_vote(seg_preds), float(probs[:, 1].mean()), seg_preds


def evaluate_recordings(params, items) -> list[RecordingResult]:
    """``items`` yields ``(record_id, domain, truth, feats)`` tuples."""
    out = []
    for rid, domain, truth, feats in items:
        pred, p_abn, seg_preds = predict_recording(params, feats)
        out.append(RecordingResult(rid, domain, int(truth), pred, p_abn, len(seg_preds)))
    return out
